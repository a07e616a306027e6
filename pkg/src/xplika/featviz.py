"""Feature visualization by normalized gradient ascent.

An objective is a weighted sum of neuron, channel, layer-mean and direction
terms on captured activations. Images are parameterized either directly in
pixel space or by a decayed Fourier spectrum passed through a sigmoid.
Random jitter/scale transforms are resampled at every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import INPUT, Model, backward_from, forward
from .errors import XplikaError
from .rng import Stream

SELECTORS = ("neuron", "channel", "layer", "direction")


@dataclass(frozen=True)
class Term:
    layer: str
    selector: str
    index: int | None = None
    vector: np.ndarray | None = None
    weight: float = 1.0

    def __post_init__(self):
        if self.selector not in SELECTORS:
            raise XplikaError(f"unknown selector {self.selector!r}")
        if self.selector in ("neuron", "channel") and self.index is None:
            raise XplikaError(f"{self.selector} selector needs an index")
        if self.selector == "direction":
            if self.vector is None:
                raise XplikaError("direction selector needs a vector")
            object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64).reshape(-1))
        if not math.isfinite(self.weight):
            raise XplikaError("term weight must be finite")


@dataclass(frozen=True)
class Objective:
    terms: tuple[Term, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise XplikaError("objective needs at least one term")

    @property
    def layers(self) -> set[str]:
        return {t.layer for t in self.terms}


def neuron(layer, index, weight=1.0) -> Term:
    return Term(layer, "neuron", index=index, weight=weight)


def channel(layer, index, weight=1.0) -> Term:
    return Term(layer, "channel", index=index, weight=weight)


def layer_mean(layer, weight=1.0) -> Term:
    return Term(layer, "layer", weight=weight)


def direction(layer, vector, weight=1.0) -> Term:
    return Term(layer, "direction", vector=vector, weight=weight)


def _term_grad(term: Term, act: np.ndarray) -> np.ndarray:
    """Gradient of one unweighted term with respect to the activation."""
    g = np.zeros(act.shape)
    if term.selector == "neuron":
        if not 0 <= term.index < act.size:
            raise XplikaError(f"neuron index {term.index} out of range for {term.layer}")
        g.reshape(-1)[term.index] = 1.0
    elif term.selector == "channel":
        # vectors have one "channel" per element
        n_ch = act.shape[0]
        if not 0 <= term.index < n_ch:
            raise XplikaError(f"channel index {term.index} out of range for {term.layer}")
        spatial = act[term.index].size if act.ndim > 1 else 1
        g[term.index] = 1.0 / spatial
    elif term.selector == "layer":
        g[...] = 1.0 / act.size
    else:
        if term.vector.size != act.size:
            raise XplikaError(f"direction length {term.vector.size} != activation size {act.size} at {term.layer}")
        g = term.vector.reshape(act.shape).copy()
    return g


def _activation(trace, layer_id):
    try:
        return trace.captured[layer_id]
    except KeyError:
        raise XplikaError(f"objective references layer {layer_id!r} missing from the trace") from None


def eval_objective(trace, objective: Objective) -> float:
    """Weighted sum of the objective's terms on a captured trace."""
    total = 0.0
    for term in objective.terms:
        act = _activation(trace, term.layer)
        # every term is linear in the activation, so value = <grad, act>
        total += term.weight * float(np.sum(_term_grad(term, act) * act))
    return total


def objective_cotangents(trace, objective: Objective) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for term in objective.terms:
        act = _activation(trace, term.layer)
        g = term.weight * _term_grad(term, act)
        out[term.layer] = out[term.layer] + g if term.layer in out else g
    return out


# --------------------------------------------------------------------------
# Fourier parameterization
# --------------------------------------------------------------------------


@dataclass
class FourierBuffer:
    """Spectrum of shape ``(C, H, W, 2)``: cosine and sine coefficient per bin."""

    spectrum: np.ndarray
    decay: float = 1.0
    scale: float = 4.0

    def __post_init__(self):
        self.spectrum = np.asarray(self.spectrum, dtype=np.float64)
        if self.spectrum.ndim != 4 or self.spectrum.shape[-1] != 2:
            raise XplikaError("spectrum must have shape (C, H, W, 2)")
        if self.decay < 0 or self.scale <= 0:
            raise XplikaError("decay must be >= 0 and scale > 0")

    @classmethod
    def zeros(cls, shape, decay=1.0, scale=4.0) -> "FourierBuffer":
        return cls(np.zeros(tuple(shape) + (2,)), decay, scale)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.spectrum.shape[:3]


class FourierBasis:
    """Direct (matrix) inverse DFT with frequency-decay preconditioning.

    The pre-sigmoid image of channel ``c`` is

        sum_{u,v} [a_uv cos(theta) + b_uv sin(theta)] / lambda_uv / sqrt(H W)

    with ``theta = 2 pi (u y / H + v x / W)`` and
    ``lambda = (sqrt(fy^2 + fx^2) + 1/max(H, W)) ** decay`` on signed
    frequencies in cycles per pixel.
    """

    def __init__(self, height: int, width: int, decay: float = 1.0):
        self.height, self.width, self.decay = height, width, decay
        ty = 2 * np.pi * np.outer(np.arange(height), np.arange(height)) / height
        tx = 2 * np.pi * np.outer(np.arange(width), np.arange(width)) / width
        self.cy, self.sy = np.cos(ty), np.sin(ty)  # [y, u]
        self.cx, self.sx = np.cos(tx), np.sin(tx)  # [x, v]
        fy = np.fft.fftfreq(height)[:, None]
        fx = np.fft.fftfreq(width)[None, :]
        eps = 1.0 / max(height, width)
        self.inv_decay = 1.0 / (np.sqrt(fy**2 + fx**2) + eps) ** decay
        self.norm = 1.0 / math.sqrt(height * width)

    def synthesize(self, spectrum: np.ndarray) -> np.ndarray:
        """Pre-sigmoid image ``(C, H, W)``; linear in the spectrum."""
        a = spectrum[..., 0] * self.inv_decay
        b = spectrum[..., 1] * self.inv_decay
        # cos(ty+tx) = cy cx - sy sx ; sin(ty+tx) = sy cx + cy sx
        out = (
            self.cy @ a @ self.cx.T
            - self.sy @ a @ self.sx.T
            + self.sy @ b @ self.cx.T
            + self.cy @ b @ self.sx.T
        )
        return out * self.norm

    def synthesize_adjoint(self, grad: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`synthesize` applied to a pre-sigmoid gradient."""
        g = grad * self.norm
        da = self.cy.T @ g @ self.cx - self.sy.T @ g @ self.sx
        db = self.sy.T @ g @ self.cx + self.cy.T @ g @ self.sx
        return np.stack([da * self.inv_decay, db * self.inv_decay], axis=-1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def decode_fourier(buffer: FourierBuffer, basis: FourierBasis | None = None) -> np.ndarray:
    """Image in (0, 1): ``sigmoid(scale * IDFT(spectrum / lambda))``."""
    _, h, w = buffer.image_shape
    basis = basis or FourierBasis(h, w, buffer.decay)
    return _sigmoid(buffer.scale * basis.synthesize(buffer.spectrum))


def decode_fourier_vjp(buffer: FourierBuffer, grad_image: np.ndarray, basis: FourierBasis | None = None) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the spectrum, given its image gradient."""
    _, h, w = buffer.image_shape
    basis = basis or FourierBasis(h, w, buffer.decay)
    img = _sigmoid(buffer.scale * basis.synthesize(buffer.spectrum))
    return basis.synthesize_adjoint(grad_image * img * (1.0 - img) * buffer.scale)


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformSpec:
    jitter: int = 0
    scale: tuple[float, float] = (1.0, 1.0)
    pad: int = 0

    def __post_init__(self):
        lo, hi = self.scale
        if self.jitter < 0 or self.pad < 0:
            raise XplikaError("jitter and pad must be >= 0")
        if not 0 < lo <= hi:
            raise XplikaError("scale range must satisfy 0 < lo <= hi")
        if self.pad < self.jitter:
            raise XplikaError("pad must be >= jitter")

    @property
    def is_identity(self) -> bool:
        return self.jitter == 0 and self.scale == (1.0, 1.0)


@dataclass(frozen=True)
class TransformDraw:
    dy: int
    dx: int
    factor: float


def sample_transform(spec: TransformSpec, stream: Stream) -> TransformDraw:
    dy, dx = (int(v) for v in stream.integers(-spec.jitter, spec.jitter, 2))
    lo, hi = spec.scale
    factor = float(stream.uniform(1, lo, hi)[0]) if hi > lo else float(lo)
    return TransformDraw(dy, dx, factor)


def _reflect(idx: np.ndarray, n: int, pad: int) -> np.ndarray:
    """Map indices onto ``[0, n)`` by reflection about the edges (no edge repeat)."""
    idx = np.clip(idx, -pad, n - 1 + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def axis_matrix(n: int, shift: int, factor: float, pad: int) -> np.ndarray:
    """``(n, n)`` linear map for one axis: shift, rescale about the centre, crop.

    Output pixel ``i`` samples the source at
    ``(i - c) / factor + c - shift`` with ``c = (n - 1) / 2``; reads past the
    border are reflected (the reflect padding) and bilinearly interpolated.
    """
    c = (n - 1) / 2.0
    src = (np.arange(n) - c) / factor + c - shift
    lo = np.floor(src)
    frac = src - lo
    lo = lo.astype(int)
    mat = np.zeros((n, n))
    rows = np.arange(n)
    np.add.at(mat, (rows, _reflect(lo, n, pad)), 1.0 - frac)
    np.add.at(mat, (rows, _reflect(lo + 1, n, pad)), frac)
    return mat


def transform_matrices(shape, draw: TransformDraw, pad: int) -> tuple[np.ndarray, np.ndarray]:
    _, h, w = shape
    return axis_matrix(h, draw.dy, draw.factor, pad), axis_matrix(w, draw.dx, draw.factor, pad)


def apply_transforms(image: np.ndarray, spec: TransformSpec, stream: Stream) -> np.ndarray:
    """Reflect-pad, jitter, rescale and center-crop a ``(C, H, W)`` image."""
    image = np.asarray(image, dtype=np.float64)
    if spec.is_identity:
        return image.copy()
    if image.ndim != 3:
        raise XplikaError("transforms apply to (C, H, W) images only")
    ty, tx = transform_matrices(image.shape, sample_transform(spec, stream), spec.pad)
    return np.einsum("yi,cij,xj->cyx", ty, image, tx)


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------


@dataclass
class VisualizationResult:
    image: np.ndarray
    trajectory: np.ndarray
    raw: np.ndarray = field(repr=False, default=None)  # pixel param before clipping


def optimize(
    model: Model,
    objective: Objective,
    param: str = "fourier",
    steps: int = 256,
    step_size: float = 0.05,
    transforms: TransformSpec | None = None,
    seed: int = 0,
    decay: float = 1.0,
    scale: float = 4.0,
    init_std: float = 0.01,
) -> VisualizationResult:
    """Maximize ``objective`` over the model input.

    Each step samples transforms, evaluates the objective on the
    transformed image, back-propagates to the parameter buffer and moves
    it by ``step_size * g / (||g|| + 1e-8)``. The trajectory records the
    objective value before each update.

    The pixel buffer starts at small zero-mean noise and is only clipped
    to ``[0, 1]`` on return; the Fourier buffer starts at small spectrum
    noise, i.e. a near-grey image.
    """
    if steps < 1:
        raise XplikaError("steps must be >= 1")
    if not step_size > 0:
        raise XplikaError("step_size must be > 0")
    if param not in ("pixel", "fourier"):
        raise XplikaError("param must be 'pixel' or 'fourier'")
    for layer_id in objective.layers:
        model.layer(layer_id)
    transforms = transforms or TransformSpec()
    shape = model.input_shape
    if not transforms.is_identity and len(shape) != 3:
        raise XplikaError("transforms need an image input")

    init = Stream(seed, 0)
    if param == "fourier":
        if len(shape) != 3:
            raise XplikaError("fourier parameterization needs an image input")
        basis = FourierBasis(shape[1], shape[2], decay)
        buffer = FourierBuffer(init_std * init.normal(math.prod(shape) * 2).reshape(shape + (2,)), decay, scale)
        params = buffer.spectrum
    else:
        params = init_std * init.normal(math.prod(shape)).reshape(shape)

    trajectory = np.empty(steps)
    for t in range(steps):
        if param == "fourier":
            buffer.spectrum = params
            image = decode_fourier(buffer, basis)
        else:
            image = params
        if transforms.is_identity:
            ty = tx = None
            seen = image
        else:
            draw = sample_transform(transforms, Stream(seed, t + 1))
            ty, tx = transform_matrices(shape, draw, transforms.pad)
            seen = np.einsum("yi,cij,xj->cyx", ty, image, tx)
        trace = forward(model, seen, capture=objective.layers)
        trajectory[t] = eval_objective(trace, objective)
        g = backward_from(model, trace, objective_cotangents(trace, objective))[INPUT]
        if ty is not None:
            g = np.einsum("yi,cyx,xj->cij", ty, g, tx)
        if param == "fourier":
            g = decode_fourier_vjp(buffer, g, basis)
        params = params + step_size * g / (np.linalg.norm(g) + 1e-8)

    if param == "fourier":
        buffer.spectrum = params
        return VisualizationResult(decode_fourier(buffer, basis), trajectory, params)
    return VisualizationResult(np.clip(params, 0.0, 1.0), trajectory, params)
