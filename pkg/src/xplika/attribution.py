"""Attribution methods.

White-box methods use engine gradients of the target logit; black-box
methods only call the model forward. Every stochastic method is a pure
function of ``(model, x, target, config)``: sample ``n`` draws from
``Stream(seed, n)`` and reductions run in ascending sample order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Any

import numpy as np

from . import grids
from .engine import (
    Conv2D,
    Model,
    ReluBackwardMode,
    backward,
    forward,
    input_gradient,
    score,
)
from .errors import NonFiniteError, XplikaError
from .parallel import ordered_map
from .rng import Stream

METHODS = (
    "saliency",
    "gradient_input",
    "integrated_gradients",
    "smoothgrad",
    "squaregrad",
    "vargrad",
    "grad_cam",
    "grad_cam_pp",
    "guided_backprop",
    "deconvnet",
    "occlusion",
    "rise",
    "lime",
    "kernel_shap",
    "sobol",
)

MAX_ENUMERATION = 4096


@dataclass(frozen=True)
class MethodConfig:
    """A method name plus every hyperparameter it may read.

    ``n_samples=None`` picks the method's default: 50 noise draws for the
    SmoothGrad family, 2000 RISE masks, full enumeration for the surrogates
    (2048 samples when ``2**M`` exceeds the enumeration cap) and 512 Sobol
    base samples. ``grid=None`` means one cell per element for vectors.
    """

    method: str
    baseline: Any = 0.0
    steps: int = 64
    sigma: float = 0.1
    n_samples: int | None = None
    conv_layer: str | None = None
    patch: Any = 1
    stride: Any = 1
    grid: Any = None
    keep_prob: float = 0.5
    kernel_width: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise XplikaError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if self.steps < 1:
            raise XplikaError("steps must be >= 1")
        if self.n_samples is not None and self.n_samples < 1:
            raise XplikaError("n_samples must be >= 1")
        if not 0.0 < self.keep_prob < 1.0:
            raise XplikaError("keep_prob must lie in (0, 1)")
        if self.sigma < 0:
            raise XplikaError("sigma must be >= 0")
        if not self.kernel_width > 0:
            raise XplikaError("kernel_width must be > 0")
        if not 0 <= self.seed < 2**64:
            raise XplikaError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        b = d["baseline"]
        if isinstance(b, np.ndarray):
            d["baseline"] = b.tolist()
        for key in ("patch", "stride", "grid"):
            if isinstance(d[key], tuple):
                d[key] = list(d[key])
        if math.isinf(d["kernel_width"]):
            d["kernel_width"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        d = dict(d)
        if d.get("kernel_width") == "inf":
            d["kernel_width"] = math.inf
        if isinstance(d.get("baseline"), list):
            d["baseline"] = np.asarray(d["baseline"], dtype=np.float64)
        for key in ("patch", "stride", "grid"):
            if isinstance(d.get(key), list):
                d[key] = tuple(d[key])
        return cls(**d)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class AttributionMap:
    values: np.ndarray
    method: str
    config_digest: str
    extras: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape


def _finish(values, config: MethodConfig, x: np.ndarray, **extras) -> AttributionMap:
    values = np.asarray(values, dtype=np.float64).reshape(x.shape)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{config.method} produced non-finite attributions")
    return AttributionMap(values, config.method, config.digest(), extras)


def _prepare(model: Model, x, target: int):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise XplikaError(f"input shape {x.shape} does not match model input {model.input_shape}")
    if not 0 <= int(target) < model.output_dim:
        raise XplikaError(f"target {target} out of range for {model.output_dim} logits")
    return x, int(target)


def resolve_baseline(baseline, x: np.ndarray) -> np.ndarray:
    """Scalar fill or full tensor; ``None`` means zeros."""
    if baseline is None:
        return np.zeros_like(x)
    b = np.asarray(baseline, dtype=np.float64)
    if b.ndim == 0:
        return np.full_like(x, float(b))
    if b.shape != x.shape:
        raise XplikaError(f"baseline shape {b.shape} does not match input {x.shape}")
    return b


# --------------------------------------------------------------------------
# gradient methods
# --------------------------------------------------------------------------


def saliency(model: Model, x, target: int) -> AttributionMap:
    """Absolute input gradient; images take the max over channels."""
    x, target = _prepare(model, x, target)
    g = np.abs(input_gradient(model, x, target))
    if g.ndim == 3:
        g = np.broadcast_to(g.max(axis=0), g.shape)
    return _finish(g, MethodConfig("saliency"), x)


def gradient_input(model: Model, x, target: int) -> AttributionMap:
    x, target = _prepare(model, x, target)
    return _finish(x * input_gradient(model, x, target), MethodConfig("gradient_input"), x)


def trapezoid_weights(steps: int) -> np.ndarray:
    w = np.full(steps + 1, 1.0 / steps)
    w[0] = w[-1] = 0.5 / steps
    return w


def integrated_gradients(model: Model, x, target: int, baseline=0.0, steps: int = 64) -> AttributionMap:
    """Path-integrated gradients from ``baseline`` to ``x``.

    The integral is approximated by the trapezoidal rule on ``steps``
    equal intervals. ``extras["gap"]`` holds the completeness gap
    ``|sum(IG) - (f(x) - f(baseline))|``.
    """
    config = MethodConfig("integrated_gradients", baseline=baseline, steps=steps)
    x, target = _prepare(model, x, target)
    xb = resolve_baseline(baseline, x)
    delta = x - xb
    weights = trapezoid_weights(steps)
    grads = ordered_map(lambda k: input_gradient(model, xb + (k / steps) * delta, target), steps + 1)
    avg = np.zeros_like(x)
    for w, g in zip(weights, grads):
        avg += w * g
    ig = delta * avg
    diff = score(model, x, target) - score(model, xb, target)
    return _finish(ig, config, x, gap=abs(float(ig.sum()) - diff), delta_f=diff)


def smoothgrad_family(
    model: Model,
    x,
    target: int,
    mode: str = "mean",
    sigma: float = 0.1,
    n_samples: int = 50,
    seed: int = 0,
) -> AttributionMap:
    """Aggregate gradients at ``x + eps_n`` with ``eps_n ~ N(0, sigma^2)``.

    ``mode`` picks the reduction: ``mean`` (SmoothGrad), ``square``
    (SquareGrad, mean of squared gradients) or ``var`` (VarGrad,
    population variance).
    """
    names = {"mean": "smoothgrad", "square": "squaregrad", "var": "vargrad"}
    if mode not in names:
        raise XplikaError(f"mode must be one of {sorted(names)}")
    config = MethodConfig(names[mode], sigma=sigma, n_samples=n_samples, seed=seed)
    x, target = _prepare(model, x, target)

    def grad(n):
        noise = Stream(seed, n).normal(x.size).reshape(x.shape)
        return input_gradient(model, x + sigma * noise, target)

    grads = ordered_map(grad, n_samples)
    mean = np.zeros_like(x)
    for g in grads:
        mean += g
    mean /= n_samples
    if mode == "mean":
        out = mean
    else:
        acc = np.zeros_like(x)
        for g in grads:
            acc += g * g if mode == "square" else (g - mean) ** 2
        out = acc / n_samples
    return _finish(out, config, x)


def modified_backprop(model: Model, x, target: int, mode: str = "guided") -> AttributionMap:
    """Signed input gradient under the guided or deconvnet ReLU rule."""
    names = {"guided": "guided_backprop", "deconv": "deconvnet"}
    if mode not in names:
        raise XplikaError(f"mode must be one of {sorted(names)}")
    x, target = _prepare(model, x, target)
    g = input_gradient(model, x, target, ReluBackwardMode(mode))
    return _finish(g, MethodConfig(names[mode]), x)


def _cam_weights(acts: np.ndarray, grads: np.ndarray, plus_plus: bool) -> np.ndarray:
    if not plus_plus:
        return grads.mean(axis=(1, 2))
    # Grad-CAM++ closed form for an exponential score:
    #   alpha = g^2 / (2 g^2 + sum_ab(A_ab) g^3), weight_k = sum_ij alpha_ij relu(g_ij)
    g2 = grads**2
    g3 = grads**3
    denom = 2.0 * g2 + acts.sum(axis=(1, 2), keepdims=True) * g3
    safe = np.where(denom != 0.0, denom, 1.0)
    alpha = np.where(denom != 0.0, g2 / safe, 0.0)
    return (alpha * np.maximum(grads, 0.0)).sum(axis=(1, 2))


def cam_from(acts: np.ndarray, grads: np.ndarray, plus_plus: bool = False) -> np.ndarray:
    """Channel-weighted, rectified activation map on the conv grid."""
    weights = _cam_weights(acts, grads, plus_plus)
    return np.maximum(np.tensordot(weights, acts, axes=1), 0.0)


def grad_cam(model: Model, x, target: int, conv_layer: str, plus_plus: bool = False) -> AttributionMap:
    """Grad-CAM (or Grad-CAM++) on the output of ``conv_layer``.

    The coarse map is kept in ``extras["grid"]``; the returned values are
    the bilinear upsampling to the input's spatial size, repeated over
    channels.
    """
    config = MethodConfig("grad_cam_pp" if plus_plus else "grad_cam", conv_layer=conv_layer)
    x, target = _prepare(model, x, target)
    if conv_layer is None or not isinstance(model.layer(conv_layer), Conv2D):
        raise XplikaError("grad-cam requires a convolutional layer")
    trace = forward(model, x, capture=[conv_layer])
    grads = backward(model, trace, target)[conv_layer]
    cam = cam_from(trace.captured[conv_layer], grads, plus_plus)
    up = grids.resize_bilinear(cam, x.shape[1:])
    return _finish(grids.expand_spatial(up, x.shape), config, x, grid=cam)


# --------------------------------------------------------------------------
# perturbation methods
# --------------------------------------------------------------------------


def patch_starts(length: int, patch: int, stride: int) -> list[int]:
    """Patch offsets covering ``[0, length)``; the last patch is clamped to the end."""
    if patch > length:
        raise XplikaError(f"patch {patch} larger than input extent {length}")
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] + patch < length:
        starts.append(length - patch)
    return starts


def occlusion(model: Model, x, target: int, patch=1, stride=1, baseline=0.0) -> AttributionMap:
    """Score drop when a sliding patch is replaced by the baseline.

    Each element receives the mean drop over all patches that cover it.
    Image patches span every channel.
    """
    config = MethodConfig("occlusion", baseline=baseline, patch=patch, stride=stride)
    x, target = _prepare(model, x, target)
    xb = resolve_baseline(baseline, x)
    spatial = grids.spatial_shape(x.shape)
    patch = (int(patch),) * len(spatial) if np.isscalar(patch) else tuple(int(p) for p in patch)
    stride = (int(stride),) * len(spatial) if np.isscalar(stride) else tuple(int(s) for s in stride)
    if len(patch) != len(spatial) or len(stride) != len(spatial):
        raise XplikaError(f"patch/stride need one entry per spatial axis {spatial}")
    if any(p < 1 for p in patch) or any(s < 1 for s in stride):
        raise XplikaError("patch and stride must be >= 1")
    starts = [patch_starts(n, p, s) for n, p, s in zip(spatial, patch, stride)]
    windows = list(product(*starts))
    base = score(model, x, target)

    def region(w):
        return tuple(slice(a, a + p) for a, p in zip(w, patch))

    def drop(i):
        sel = (slice(None),) + region(windows[i]) if x.ndim == 3 else region(windows[i])
        xo = x.copy()
        xo[sel] = xb[sel]
        return base - score(model, xo, target)

    drops = ordered_map(drop, len(windows))
    total = np.zeros(spatial)
    count = np.zeros(spatial)
    for w, d in zip(windows, drops):
        total[region(w)] += d
        count[region(w)] += 1
    return _finish(grids.expand_spatial(total / count, x.shape), config, x)


def _default_grid(x_shape, cap: int) -> tuple[int, ...]:
    spatial = grids.spatial_shape(x_shape)
    if len(spatial) == 1:
        return spatial
    return tuple(min(s, cap) for s in spatial)


def rise_mask(stream: Stream, grid: tuple[int, ...], spatial: tuple[int, ...], p: float) -> np.ndarray:
    """One RISE mask: a Bernoulli(p) grid, smoothly upsampled and randomly shifted.

    When the grid already matches the input the binary grid is used as is.
    """
    bits = stream.bernoulli(p, math.prod(grid)).reshape(grid)
    if grid == spatial:
        return bits
    cells = [-(-s // g) for s, g in zip(spatial, grid)]
    up = grids.resize_bilinear(bits, tuple((g + 1) * c for g, c in zip(grid, cells)))
    shifts = [int(stream.integers(0, c - 1, 1)[0]) for c in cells]
    return up[tuple(slice(o, o + s) for o, s in zip(shifts, spatial))]


def rise(model: Model, x, target: int, n_samples: int = 2000, grid=None, keep_prob: float = 0.5, seed: int = 0) -> AttributionMap:
    """RISE saliency, normalized by ``N * keep_prob``.

    ``extras["stderr"]`` is the per-element Monte-Carlo standard error.
    """
    config = MethodConfig("rise", n_samples=n_samples, grid=grid, keep_prob=keep_prob, seed=seed)
    x, target = _prepare(model, x, target)
    spatial = grids.spatial_shape(x.shape)
    g = grids.normalize_grid(grid if grid is not None else _default_grid(x.shape, 7), x.shape)
    p = keep_prob

    def sample(n):
        m = rise_mask(Stream(seed, n), g, spatial, p)
        return score(model, x * grids.expand_spatial(m, x.shape), target), m

    total = np.zeros(spatial)
    total_sq = np.zeros(spatial)
    for s, m in ordered_map(sample, n_samples):
        v = s * m / p
        total += v
        total_sq += v * v
    mean = total / n_samples
    if n_samples > 1:
        var = np.maximum(total_sq / n_samples - mean**2, 0.0) * n_samples / (n_samples - 1)
        stderr = np.sqrt(var / n_samples)
    else:
        stderr = np.full(spatial, np.inf)
    return _finish(grids.expand_spatial(mean, x.shape), config, x, stderr=stderr)


def kernel_shap_weight(m: int, size: int) -> float:
    """Shapley kernel weight of a coalition of ``size`` out of ``m`` features."""
    if not 0 < size < m:
        raise XplikaError("kernel weight is infinite for empty or full coalitions")
    return (m - 1) / (math.comb(m, size) * size * (m - size))


def _enumerate(m: int) -> np.ndarray:
    k = np.arange(2**m)[:, None]
    return ((k >> np.arange(m)[None, :]) & 1).astype(np.float64)


def _kernel_shap_sample(stream: Stream, m: int) -> np.ndarray:
    sizes = np.arange(1, m)
    probs = (m - 1) / (sizes * (m - sizes))
    cdf = np.cumsum(probs / probs.sum())
    size = int(sizes[min(np.searchsorted(cdf, stream.uniform(1)[0], side="right"), m - 2)])
    z = np.zeros(m)
    z[stream.permutation(m)[:size]] = 1.0
    return z


def _wls(design: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    sw = np.sqrt(w)
    sol, _, rank, _ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    if rank < design.shape[1]:
        raise XplikaError("degenerate design, increase N")
    return sol


def surrogate_explain(
    model: Model,
    x,
    target: int,
    kind: str = "kernel_shap",
    grid=None,
    n_samples: int | None = None,
    kernel_width: float = 0.25,
    baseline=0.0,
    seed: int = 0,
) -> AttributionMap:
    """Weighted linear surrogate over regular-grid segments (LIME or KernelSHAP).

    A coalition ``z`` keeps the segments where ``z == 1`` and replaces the
    rest with the baseline. With ``n_samples=None`` every coalition is
    enumerated (up to 4096); otherwise ``n_samples`` seeded coalitions are
    drawn.

    KernelSHAP pins the intercept to ``f(baseline)`` and the coefficient
    sum to ``f(x) - f(baseline)``, then solves the remaining weighted least
    squares problem with Shapley kernel weights. LIME fits an intercept
    and weights samples by ``exp(-D^2 / kernel_width^2)``, ``D`` being the
    fraction of switched-off segments.
    """
    if kind not in ("lime", "kernel_shap"):
        raise XplikaError("kind must be 'lime' or 'kernel_shap'")
    config = MethodConfig(kind, baseline=baseline, grid=grid, n_samples=n_samples, kernel_width=kernel_width, seed=seed)
    x, target = _prepare(model, x, target)
    xb = resolve_baseline(baseline, x)
    g = grids.normalize_grid(grid if grid is not None else _default_grid(x.shape, 4), x.shape)
    cells = grids.cell_index(x.shape, g)
    m = math.prod(g)
    if m < 2:
        raise XplikaError("surrogate methods need at least 2 segments")

    if n_samples is None and 2**m > MAX_ENUMERATION:
        n_samples = 2048
    if n_samples is None:
        z = _enumerate(m)
        if kind == "kernel_shap":
            z = z[1:-1]  # drop all-off and all-on; they enter through the constraints
    else:
        if n_samples < m + 2:
            raise XplikaError(f"n_samples must be >= M + 2 = {m + 2}")
        if kind == "kernel_shap":
            z = np.stack([_kernel_shap_sample(Stream(seed, n), m) for n in range(n_samples)])
        else:
            rows = [Stream(seed, n).bernoulli(0.5, m) for n in range(n_samples - 1)]
            z = np.stack([np.ones(m)] + rows)

    fz = np.array(ordered_map(lambda i: score(model, np.where(z[i][cells] == 1.0, x, xb), target), len(z)))
    f_x = score(model, x, target)
    f_b = score(model, xb, target)

    if kind == "kernel_shap":
        sizes = z.sum(axis=1).astype(int)
        if n_samples is None:
            w = np.array([kernel_shap_weight(m, int(s)) for s in sizes])
        else:
            w = np.ones(len(z))  # sizes were already drawn from the kernel
        delta = f_x - f_b
        design = z[:, :-1] - z[:, -1:]
        head = _wls(design, fz - f_b - z[:, -1] * delta, w)
        coef = np.append(head, delta - head.sum())
    else:
        dist = (m - z.sum(axis=1)) / m
        w = np.exp(-(dist**2) / kernel_width**2)
        sol = _wls(np.hstack([np.ones((len(z), 1)), z]), fz, w)
        coef = sol[1:]
    return _finish(coef[cells], config, x, coefficients=coef, n_evaluations=len(z))


def sobol_attribution(model: Model, x, target: int, grid=None, n_samples: int = 512, baseline=0.0, seed: int = 0) -> AttributionMap:
    """Total-order Sobol indices of grid cells under continuous masking.

    A mask ``m`` in ``[0, 1]^d`` perturbs the input as
    ``baseline + m[cell] * (x - baseline)``. Indices use the Jansen
    estimator on a replicated design (A, B, AB_i).
    """
    config = MethodConfig("sobol", baseline=baseline, grid=grid, n_samples=n_samples, seed=seed)
    x, target = _prepare(model, x, target)
    if n_samples < 64:
        raise XplikaError("sobol needs n_samples >= 64")
    xb = resolve_baseline(baseline, x)
    g = grids.normalize_grid(grid if grid is not None else _default_grid(x.shape, 4), x.shape)
    cells = grids.cell_index(x.shape, g)
    d = math.prod(g)
    delta = x - xb

    def f(mask):
        return score(model, xb + mask[cells] * delta, target)

    def sample(n):
        u = Stream(seed, n).uniform(2 * d)
        a, b = u[:d], u[d:]
        out = np.empty(d + 1)
        out[0] = f(a)
        for i in range(d):
            ab = a.copy()
            ab[i] = b[i]
            out[i + 1] = f(ab)
        return out

    evals = np.stack(ordered_map(sample, n_samples))
    f_a = evals[:, 0]
    var = float(np.var(f_a))
    if var < 1e-12:
        raise XplikaError("constant model under perturbation")
    sq = (f_a[:, None] - evals[:, 1:]) ** 2
    st = np.maximum(sq.mean(axis=0) / (2.0 * var), 0.0)
    stderr = sq.std(axis=0, ddof=1) / np.sqrt(n_samples) / (2.0 * var)
    return _finish(st[cells], config, x, indices=st, stderr=stderr, variance=var)


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def explain(model: Model, x, target: int, config: MethodConfig) -> AttributionMap:
    """Run the method named in ``config`` with its hyperparameters."""
    c = config
    name = c.method
    if name == "saliency":
        out = saliency(model, x, target)
    elif name == "gradient_input":
        out = gradient_input(model, x, target)
    elif name == "integrated_gradients":
        out = integrated_gradients(model, x, target, c.baseline, c.steps)
    elif name in ("smoothgrad", "squaregrad", "vargrad"):
        mode = {"smoothgrad": "mean", "squaregrad": "square", "vargrad": "var"}[name]
        out = smoothgrad_family(model, x, target, mode, c.sigma, c.n_samples or 50, c.seed)
    elif name in ("grad_cam", "grad_cam_pp"):
        out = grad_cam(model, x, target, c.conv_layer, plus_plus=name == "grad_cam_pp")
    elif name in ("guided_backprop", "deconvnet"):
        out = modified_backprop(model, x, target, "guided" if name == "guided_backprop" else "deconv")
    elif name == "occlusion":
        out = occlusion(model, x, target, c.patch, c.stride, c.baseline)
    elif name == "rise":
        out = rise(model, x, target, c.n_samples or 2000, c.grid, c.keep_prob, c.seed)
    elif name in ("lime", "kernel_shap"):
        out = surrogate_explain(model, x, target, name, c.grid, c.n_samples, c.kernel_width, c.baseline, c.seed)
    else:
        out = sobol_attribution(model, x, target, c.grid, c.n_samples or 512, c.baseline, c.seed)
    # the digest always reflects the full config the caller asked for
    out.config_digest = c.digest()
    return out
