"""Deterministic forward/backward engine for small feed-forward networks.

Tensors are plain ``float64`` numpy arrays. Images are ``(C, H, W)``,
tabular inputs are flat vectors. Models hold no softmax; every attribution
target is a logit.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ModelError, NonFiniteError, XplikaError

INPUT = "INPUT"
MANIFEST_VERSION = 1


class ReluBackwardMode(str, enum.Enum):
    STANDARD = "standard"
    DECONV = "deconv"
    GUIDED = "guided"


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ModelError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name}: non-finite parameter")
    arr.flags.writeable = False
    return arr


def _check_id(layer_id: str) -> None:
    if not isinstance(layer_id, str) or not layer_id:
        raise ModelError("layer id must be a non-empty string")


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dense:
    id: str
    weight: np.ndarray
    bias: np.ndarray | None = None
    kind = "dense"

    def __post_init__(self):
        _check_id(self.id)
        object.__setattr__(self, "weight", _frozen(self.weight, 2, self.id))
        if self.bias is not None:
            object.__setattr__(self, "bias", _frozen(self.bias, 1, self.id))
            if self.bias.shape[0] != self.weight.shape[0]:
                raise ModelError(f"{self.id}: bias length does not match out features")

    def output_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.weight.shape[1]:
            raise ModelError(f"shape-chain mismatch at {self.id}")
        return (self.weight.shape[0],)

    def forward(self, x):
        y = self.weight @ x
        return y if self.bias is None else y + self.bias

    def backward(self, x, g, mode):
        return self.weight.T @ g


def same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    """Zero padding (before, after) so the output has ``ceil(size/stride)`` cells."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


@dataclass(frozen=True, eq=False)
class Conv2D:
    id: str
    kernel: np.ndarray  # out_c x in_c x kh x kw
    bias: np.ndarray | None = None
    stride: int = 1
    padding: str = "valid"
    kind = "conv2d"

    def __post_init__(self):
        _check_id(self.id)
        object.__setattr__(self, "kernel", _frozen(self.kernel, 4, self.id))
        if self.bias is not None:
            object.__setattr__(self, "bias", _frozen(self.bias, 1, self.id))
            if self.bias.shape[0] != self.kernel.shape[0]:
                raise ModelError(f"{self.id}: bias length does not match out channels")
        if self.stride < 1:
            raise ModelError(f"{self.id}: stride must be >= 1")
        if self.padding not in ("valid", "same"):
            raise ModelError(f"{self.id}: padding must be 'valid' or 'same'")

    def _pads(self, h, w):
        _, _, kh, kw = self.kernel.shape
        if self.padding == "same":
            return same_padding(h, kh, self.stride), same_padding(w, kw, self.stride)
        return (0, 0), (0, 0)

    def output_shape(self, in_shape):
        oc, ic, kh, kw = self.kernel.shape
        if len(in_shape) != 3 or in_shape[0] != ic:
            raise ModelError(f"shape-chain mismatch at {self.id}")
        _, h, w = in_shape
        (pt, pb), (pl, pr) = self._pads(h, w)
        hp, wp = h + pt + pb, w + pl + pr
        if hp < kh or wp < kw:
            raise ModelError(f"shape-chain mismatch at {self.id}")
        return (oc, (hp - kh) // self.stride + 1, (wp - kw) // self.stride + 1)

    def forward(self, x):
        _, _, kh, kw = self.kernel.shape
        (pt, pb), (pl, pr) = self._pads(x.shape[1], x.shape[2])
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr)))
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, :: self.stride, :: self.stride]
        y = np.einsum("ihwab,oiab->ohw", win, self.kernel)
        if self.bias is not None:
            y = y + self.bias[:, None, None]
        return y

    def backward(self, x, g, mode):
        _, _, kh, kw = self.kernel.shape
        _, h, w = x.shape
        (pt, pb), (pl, pr) = self._pads(h, w)
        s = self.stride
        ho, wo = g.shape[1:]
        cols = np.einsum("ohw,oiab->ihwab", g, self.kernel)
        dxp = np.zeros((x.shape[0], h + pt + pb, w + pl + pr))
        for a in range(kh):
            for b in range(kw):
                dxp[:, a : a + s * (ho - 1) + 1 : s, b : b + s * (wo - 1) + 1 : s] += cols[:, :, :, a, b]
        # padding cells are constants: their gradient is discarded
        return dxp[:, pt : pt + h, pl : pl + w]


@dataclass(frozen=True, eq=False)
class ReLU:
    id: str
    kind = "relu"

    def __post_init__(self):
        _check_id(self.id)

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, g, mode):
        mode = ReluBackwardMode(mode)
        if mode is ReluBackwardMode.STANDARD:
            return g * (x > 0)
        if mode is ReluBackwardMode.DECONV:
            return g * (g > 0)
        return g * (x > 0) * (g > 0)


@dataclass(frozen=True, eq=False)
class _Pool2D:
    id: str
    window: int
    stride: int | None = None

    def __post_init__(self):
        _check_id(self.id)
        if self.stride is None:
            object.__setattr__(self, "stride", self.window)
        if self.window < 1 or self.stride < 1:
            raise ModelError(f"{self.id}: window and stride must be >= 1")

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] < self.window or in_shape[2] < self.window:
            raise ModelError(f"shape-chain mismatch at {self.id}")
        c, h, w = in_shape
        k, s = self.window, self.stride
        return (c, (h - k) // s + 1, (w - k) // s + 1)

    def _windows(self, x):
        k, s = self.window, self.stride
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        return win.reshape(win.shape[:3] + (k * k,))


class MaxPool2D(_Pool2D):
    kind = "maxpool2d"

    def forward(self, x):
        return self._windows(x).max(axis=-1)

    def backward(self, x, g, mode):
        k, s = self.window, self.stride
        # np.argmax returns the first row-major maximum: deterministic ties
        idx = self._windows(x).argmax(axis=-1)
        dx = np.zeros_like(x)
        c, ho, wo = g.shape
        ci, hi, wi = np.meshgrid(np.arange(c), np.arange(ho), np.arange(wo), indexing="ij")
        rows = hi * s + idx // k
        cols = wi * s + idx % k
        np.add.at(dx, (ci, rows, cols), g)
        return dx


class AvgPool2D(_Pool2D):
    kind = "avgpool2d"

    def forward(self, x):
        return self._windows(x).mean(axis=-1)

    def backward(self, x, g, mode):
        k, s = self.window, self.stride
        dx = np.zeros_like(x)
        ho, wo = g.shape[1:]
        share = g / (k * k)
        for a in range(k):
            for b in range(k):
                dx[:, a : a + s * (ho - 1) + 1 : s, b : b + s * (wo - 1) + 1 : s] += share
        return dx


@dataclass(frozen=True, eq=False)
class Flatten:
    id: str
    kind = "flatten"

    def __post_init__(self):
        _check_id(self.id)

    def output_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, x):
        return x.reshape(-1)

    def backward(self, x, g, mode):
        return g.reshape(x.shape)


Layer = Dense | Conv2D | ReLU | MaxPool2D | AvgPool2D | Flatten
LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, MaxPool2D, AvgPool2D, Flatten)}


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


class Model:
    """An ordered, immutable chain of layers.

    The constructor validates ids and the shape chain; the final layer must
    produce a flat logit vector.
    """

    def __init__(self, layers: Iterable[Layer], input_shape: Iterable[int]):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        if not self.layers:
            raise ModelError("model has no layers")
        if not self.input_shape or any(d < 1 for d in self.input_shape):
            raise ModelError(f"invalid input shape {self.input_shape}")
        seen = set()
        shapes = [self.input_shape]
        for layer in self.layers:
            if layer.id in seen:
                raise ModelError(f"duplicate layer id {layer.id!r}")
            seen.add(layer.id)
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        if len(shapes[-1]) != 1:
            raise ModelError("final layer must output a flat logit vector")
        self.shapes = tuple(shapes)
        self.output_dim = shapes[-1][0]
        self._index = {layer.id: i for i, layer in enumerate(self.layers)}

    def __repr__(self):
        kinds = ", ".join(f"{l.id}:{l.kind}" for l in self.layers)
        return f"Model(input_shape={self.input_shape}, layers=[{kinds}])"

    def layer(self, layer_id: str) -> Layer:
        try:
            return self.layers[self._index[layer_id]]
        except KeyError:
            raise XplikaError(f"unknown layer id {layer_id!r}") from None

    def layer_index(self, layer_id: str) -> int:
        self.layer(layer_id)
        return self._index[layer_id]

    def activation_shape(self, layer_id: str) -> tuple[int, ...]:
        return self.shapes[self.layer_index(layer_id) + 1]

    def replace_layer(self, layer_id: str, new_layer: Layer) -> "Model":
        """Return a copy of the model with one layer swapped out."""
        i = self.layer_index(layer_id)
        layers = list(self.layers)
        layers[i] = new_layer
        return Model(layers, self.input_shape)


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    output: np.ndarray
    captured: dict[str, np.ndarray]
    # per-layer inputs, kept for the backward pass
    _inputs: tuple[np.ndarray, ...] = field(repr=False, default=())
    _model: Model | None = field(repr=False, default=None)


def _as_input(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise XplikaError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x


def forward(model: Model, x, capture: Iterable[str] = ()) -> ForwardTrace:
    """Run the model on one input, keeping the activations named in ``capture``."""
    x = _as_input(model, x)
    capture = set(capture)
    for layer_id in capture:
        model.layer(layer_id)
    inputs = []
    captured = {}
    h = x
    for layer in model.layers:
        inputs.append(h)
        with np.errstate(over="ignore", invalid="ignore"):
            h = layer.forward(h)
        if not np.all(np.isfinite(h)):
            raise NonFiniteError(f"non-finite activation at {layer.id}")
        if layer.id in capture:
            captured[layer.id] = h
    return ForwardTrace(output=h, captured=captured, _inputs=tuple(inputs), _model=model)


def logits(model: Model, x) -> np.ndarray:
    return forward(model, x).output


def score(model: Model, x, target: int) -> float:
    return float(forward(model, x).output[target])


def backward_from(
    model: Model,
    trace: ForwardTrace,
    cotangents: Mapping[str, np.ndarray],
    mode: ReluBackwardMode | str = ReluBackwardMode.STANDARD,
) -> dict[str, np.ndarray]:
    """Vector-Jacobian product seeded at arbitrary layer outputs.

    ``cotangents`` maps layer ids (or ``"OUTPUT"`` for the logits) to
    upstream gradients with the shape of that layer's output. Returns the
    gradient with respect to the input (key ``INPUT``) and every captured
    activation.
    """
    if trace._model is not model:
        raise XplikaError("stale trace: produced by a different model")
    mode = ReluBackwardMode(mode)
    seeds = {}
    for key, g in cotangents.items():
        if key == "OUTPUT":
            key = model.layers[-1].id
        elif key not in trace.captured:
            raise XplikaError(f"stale trace: layer {key!r} was not captured")
        g = np.asarray(g, dtype=np.float64)
        shape = model.shapes[model.layer_index(key) + 1]
        if g.shape != shape:
            raise XplikaError(f"cotangent for {key!r} has shape {g.shape}, expected {shape}")
        seeds[key] = seeds[key] + g if key in seeds else g
    grads = {}
    g = np.zeros(model.shapes[-1])
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.id in seeds:
            g = g + seeds[layer.id]
        if layer.id in trace.captured:
            grads[layer.id] = g
        g = layer.backward(trace._inputs[i], g, mode)
    grads[INPUT] = g
    return grads


def backward(
    model: Model,
    trace: ForwardTrace,
    target: int,
    mode: ReluBackwardMode | str = ReluBackwardMode.STANDARD,
) -> dict[str, np.ndarray]:
    """Gradient of logit ``target`` w.r.t. the input and captured activations."""
    if not 0 <= int(target) < model.output_dim:
        raise XplikaError(f"target {target} out of range for {model.output_dim} logits")
    seed = np.zeros(model.output_dim)
    seed[int(target)] = 1.0
    return backward_from(model, trace, {"OUTPUT": seed}, mode)


def input_gradient(model: Model, x, target: int, mode=ReluBackwardMode.STANDARD) -> np.ndarray:
    return backward(model, forward(model, x), target, mode)[INPUT]


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _read_floats(blob: bytes, offset, length, layer_id: str) -> np.ndarray:
    if not isinstance(offset, int) or not isinstance(length, int) or offset < 0 or length < 0:
        raise ModelError(f"malformed manifest: bad weight offset/length at {layer_id}")
    if (offset + length) * 4 > len(blob):
        raise ModelError(f"weight blob out of range at {layer_id}")
    return np.frombuffer(blob, dtype="<f4", count=length, offset=offset * 4).astype(np.float64)


def _layer_from_entry(entry: dict, blob: bytes) -> Layer:
    try:
        layer_id = entry["id"]
        kind = entry["kind"]
    except (KeyError, TypeError):
        raise ModelError("malformed manifest: layer entry needs 'id' and 'kind'") from None
    if kind not in LAYER_KINDS:
        raise ModelError(f"unknown layer kind {kind!r} at {layer_id}")

    def bias(n):
        if entry.get("bias_offset") is None:
            return None
        if entry.get("bias_len") != n:
            raise ModelError(f"malformed manifest: bias_len at {layer_id}")
        return _read_floats(blob, entry["bias_offset"], n, layer_id)

    try:
        if kind == "dense":
            n_in, n_out = int(entry["in_features"]), int(entry["out_features"])
            if entry["weight_len"] != n_in * n_out:
                raise ModelError(f"malformed manifest: weight_len at {layer_id}")
            w = _read_floats(blob, entry["weight_offset"], n_in * n_out, layer_id)
            return Dense(layer_id, w.reshape(n_out, n_in), bias(n_out))
        if kind == "conv2d":
            ic, oc = int(entry["in_channels"]), int(entry["out_channels"])
            kh, kw = (int(k) for k in entry["kernel_size"])
            n = oc * ic * kh * kw
            if entry["weight_len"] != n:
                raise ModelError(f"malformed manifest: weight_len at {layer_id}")
            k = _read_floats(blob, entry["weight_offset"], n, layer_id)
            return Conv2D(
                layer_id,
                k.reshape(oc, ic, kh, kw),
                bias(oc),
                stride=int(entry.get("stride", 1)),
                padding=entry.get("padding", "valid"),
            )
        if kind in ("maxpool2d", "avgpool2d"):
            window = int(entry["window"])
            return LAYER_KINDS[kind](layer_id, window, int(entry.get("stride", window)))
        return LAYER_KINDS[kind](layer_id)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"malformed manifest at {layer_id}: {exc}") from None


def load_model(manifest: str | bytes | dict, weights: bytes) -> Model:
    """Build a model from a JSON manifest and a little-endian float32 blob.

    Offsets and lengths in the manifest count float32 values, not bytes.
    """
    if isinstance(manifest, (str, bytes)):
        try:
            manifest = json.loads(manifest)
        except json.JSONDecodeError as exc:
            raise ModelError(f"malformed manifest: {exc}") from None
    if not isinstance(manifest, dict):
        raise ModelError("malformed manifest: top level must be an object")
    if manifest.get("version") != MANIFEST_VERSION:
        raise ModelError(f"malformed manifest: unsupported version {manifest.get('version')!r}")
    if "input_shape" not in manifest or not isinstance(manifest.get("layers"), list):
        raise ModelError("malformed manifest: needs 'input_shape' and 'layers'")
    layers = [_layer_from_entry(e, bytes(weights)) for e in manifest["layers"]]
    return Model(layers, manifest["input_shape"])


def save_model(model: Model) -> tuple[str, bytes]:
    """Inverse of :func:`load_model`. Parameters are rounded to float32."""
    chunks: list[np.ndarray] = []
    offset = 0

    def put(arr):
        nonlocal offset
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        chunks.append(flat)
        start = offset
        offset += flat.size
        return start, flat.size

    entries = []
    for layer in model.layers:
        entry = {"id": layer.id, "kind": layer.kind}
        if isinstance(layer, Dense):
            entry["out_features"], entry["in_features"] = layer.weight.shape
            entry["weight_offset"], entry["weight_len"] = put(layer.weight)
        elif isinstance(layer, Conv2D):
            oc, ic, kh, kw = layer.kernel.shape
            entry.update(
                in_channels=ic, out_channels=oc, kernel_size=[kh, kw],
                stride=layer.stride, padding=layer.padding,
            )
            entry["weight_offset"], entry["weight_len"] = put(layer.kernel)
        elif isinstance(layer, _Pool2D):
            entry.update(window=layer.window, stride=layer.stride)
        bias = getattr(layer, "bias", None)
        if bias is not None:
            entry["bias_offset"], entry["bias_len"] = put(bias)
        entries.append(entry)
    manifest = {"version": MANIFEST_VERSION, "input_shape": list(model.input_shape), "layers": entries}
    blob = b"".join(c.tobytes() for c in chunks)
    return json.dumps(manifest, indent=2), blob


def load_model_files(manifest_path, weights_path) -> Model:
    with open(manifest_path, "r", encoding="utf-8") as fh:
        text = fh.read()
    with open(weights_path, "rb") as fh:
        blob = fh.read()
    return load_model(text, blob)


def save_model_files(model: Model, manifest_path, weights_path) -> None:
    text, blob = save_model(model)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(weights_path, "wb") as fh:
        fh.write(blob)
