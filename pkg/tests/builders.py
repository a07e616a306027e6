"""Small model fixtures shared by the test modules."""

import numpy as np

from xplika import AvgPool2D, Conv2D, Dense, Flatten, MaxPool2D, Model, ReLU, forward


def linear(w, bias=None):
    w = np.asarray(w, dtype=float)
    b = None if bias is None else [bias]
    return Model([Dense("out", w[None, :], b)], [w.size])


def constant(value, n):
    return Model([Dense("out", np.zeros((1, n)), [value])], [n])


def relu_ramp():
    """f(x) = relu(x - 1) on a scalar input."""
    return Model([Dense("shift", [[1.0]], [-1.0]), ReLU("relu"), Dense("out", [[1.0]])], [1])


def sign_net():
    """z = x, relu, dense (1, -1)."""
    return Model([Dense("z", np.eye(2)), ReLU("relu"), Dense("out", [[1.0, -1.0]])], [2])


def random_model(seed, variant=None):
    """Seeded net with at most 4 layers and at most 256 parameters."""
    rng = np.random.default_rng(seed)
    variant = seed % 5 if variant is None else variant
    if variant == 3:
        n_in, hidden, n_out = 6, 8, 3
        layers = [
            Dense("fc1", rng.normal(size=(hidden, n_in)), rng.normal(size=hidden)),
            ReLU("relu"),
            Dense("fc2", rng.normal(size=(n_out, hidden)), rng.normal(size=n_out)),
        ]
        return Model(layers, [n_in])
    c_in, side, c_mid, n_out = 2, 5, 2, 3
    if variant == 0:
        conv = Conv2D("conv", rng.normal(size=(c_mid, c_in, 3, 3)), rng.normal(size=c_mid), padding="same")
        mid, flat = ReLU("relu"), c_mid * side * side
    elif variant == 1:
        conv = Conv2D("conv", rng.normal(size=(c_mid, c_in, 2, 2)), rng.normal(size=c_mid), padding="valid")
        mid, flat = MaxPool2D("pool", 2), c_mid * 2 * 2
    elif variant == 2:
        conv = Conv2D("conv", rng.normal(size=(c_mid, c_in, 3, 3)), rng.normal(size=c_mid), padding="same")
        mid, flat = AvgPool2D("pool", 2, 1), c_mid * 4 * 4
    else:
        conv = Conv2D("conv", rng.normal(size=(c_mid, c_in, 3, 3)), rng.normal(size=c_mid), stride=2, padding="same")
        mid, flat = ReLU("relu"), c_mid * 3 * 3
    layers = [conv, mid, Flatten("flat"), Dense("fc", rng.normal(size=(n_out, flat)) / np.sqrt(flat))]
    return Model(layers, [c_in, side, side])


def param_count(model):
    total = 0
    for layer in model.layers:
        for name in ("weight", "kernel", "bias"):
            arr = getattr(layer, name, None)
            if arr is not None:
                total += arr.size
    return total


def kink_margin(model, x):
    """Smallest distance of any ReLU input from 0 or any max-pool runner-up from its max."""
    trace = forward(model, x)
    margin = np.inf
    for layer, inp in zip(model.layers, trace._inputs):
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.abs(inp).min()))
        elif isinstance(layer, MaxPool2D):
            win = layer._windows(inp)
            top2 = np.sort(win, axis=-1)[..., -2:]
            margin = min(margin, float((top2[..., 1] - top2[..., 0]).min()))
    return margin


def safe_input(model, rng, margin=1e-3):
    """Draw an input whose kinks are all further than ``margin`` away."""
    while True:
        x = rng.normal(size=model.input_shape)
        if kink_margin(model, x) > margin:
            return x


def central_difference(fn, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        e = e.reshape(x.shape)
        flat[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return grad


def relative_error(approx, exact):
    """Max absolute deviation scaled by the largest reference magnitude."""
    scale = max(float(np.abs(exact).max()), 1e-12)
    return float(np.abs(np.asarray(approx) - exact).max()) / scale


def conv_sanity_model(seed=0):
    rng = np.random.default_rng(seed)
    layers = [
        Conv2D("conv", rng.normal(size=(3, 1, 3, 3)), rng.normal(size=3) * 0.1, padding="same"),
        ReLU("relu"),
        Flatten("flat"),
        Dense("fc", rng.normal(size=(2, 3 * 6 * 6)) / 6.0, rng.normal(size=2) * 0.1),
    ]
    return Model(layers, [1, 6, 6])
