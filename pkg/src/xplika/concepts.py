"""Concept activation vectors and TCAV scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import grids
from .attribution import AttributionMap
from .engine import Conv2D, Model, backward, forward
from .errors import XplikaError
from .featviz import Objective, direction
from .rng import Stream

LOW_QUALITY_ACCURACY = 0.6


@dataclass
class ActivationSet:
    layer: str
    rows: np.ndarray  # (n, dim)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise XplikaError("activation rows must form a 2-d array")

    def __len__(self):
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class CAV:
    layer: str
    vector: np.ndarray
    held_out_accuracy: float
    epochs: int
    final_loss: float
    seed: int = 0
    warnings: list[str] = field(default_factory=list)

    def metadata(self) -> dict:
        return {
            "layer": self.layer,
            "accuracy": self.held_out_accuracy,
            "epochs": self.epochs,
            "loss": self.final_loss,
            "seed": self.seed,
            "warnings": list(self.warnings),
        }


def collect_activations(model: Model, inputs, layer: str) -> ActivationSet:
    """Flattened post-layer activations, one row per input, in input order."""
    size = math.prod(model.activation_shape(layer))
    rows = [forward(model, x, capture=[layer]).captured[layer].reshape(-1) for x in inputs]
    return ActivationSet(layer, np.stack(rows) if rows else np.zeros((0, size)))


def _split(n: int, holdout: float, stream: Stream) -> tuple[np.ndarray, np.ndarray]:
    perm = stream.permutation(n)
    n_test = min(max(1, int(round(holdout * n))), n - 1)
    return perm[n_test:], perm[:n_test]


def _log_loss(z, y):
    # mean of log(1 + exp(-s z)) with s = +-1, written stably
    s = 2.0 * y - 1.0
    return float(np.mean(np.logaddexp(0.0, -s * z)))


def fit_cav(
    positives: ActivationSet,
    negatives: ActivationSet,
    epochs: int = 200,
    learning_rate: float = 0.1,
    holdout: float = 0.25,
    seed: int = 0,
) -> CAV:
    """Logistic-regression CAV fitted by full-batch gradient descent.

    Each class is split separately into train and held-out rows, both
    classes drawing their shuffle from the same seeded stream. The returned vector is the unit-normalized weight,
    pointing toward the positive class.
    """
    if positives.layer != negatives.layer:
        raise XplikaError("positives and negatives come from different layers")
    if positives.dim != negatives.dim:
        raise XplikaError(f"dimension mismatch: {positives.dim} vs {negatives.dim}")
    if len(positives) < 4 or len(negatives) < 4:
        raise XplikaError("fit_cav needs at least 4 rows per class")
    if not 0.0 < holdout < 1.0:
        raise XplikaError("holdout must lie in (0, 1)")

    # both classes share one shuffle stream, so a row present in both sets
    # lands on the same side of the split and cannot leak across it
    tr_p, te_p = _split(len(positives), holdout, Stream(seed, 0))
    tr_n, te_n = _split(len(negatives), holdout, Stream(seed, 0))
    x_train = np.vstack([positives.rows[tr_p], negatives.rows[tr_n]])
    y_train = np.concatenate([np.ones(len(tr_p)), np.zeros(len(tr_n))])
    x_test = np.vstack([positives.rows[te_p], negatives.rows[te_n]])
    y_test = np.concatenate([np.ones(len(te_p)), np.zeros(len(te_n))])

    w = np.zeros(positives.dim)
    b = 0.0
    n = len(y_train)
    for _ in range(epochs):
        p = 0.5 * (1.0 + np.tanh(0.5 * (x_train @ w + b)))
        err = p - y_train
        w = w - learning_rate * (x_train.T @ err) / n
        b = b - learning_rate * float(err.sum()) / n
    loss = _log_loss(x_train @ w + b, y_train)
    accuracy = float(np.mean(((x_test @ w + b) >= 0.0) == (y_test == 1.0)))

    warnings = []
    norm = float(np.linalg.norm(w))
    if norm < 1e-12:
        # no separating signal at all: fall back to the class-mean difference
        w = positives.rows.mean(axis=0) - negatives.rows.mean(axis=0)
        norm = float(np.linalg.norm(w))
        if norm < 1e-12:
            w = np.zeros(positives.dim)
            w[0] = norm = 1.0
        warnings.append("degenerate fit: weight vector vanished")
    if accuracy < LOW_QUALITY_ACCURACY:
        warnings.append("low-quality CAV")
    return CAV(positives.layer, w / norm, accuracy, epochs, loss, seed, warnings)


def _check_cav(model: Model, layer: str, cav: CAV) -> tuple[int, ...]:
    if cav.layer != layer:
        raise XplikaError(f"CAV belongs to layer {cav.layer!r}, not {layer!r}")
    shape = model.activation_shape(layer)
    if cav.vector.size != math.prod(shape):
        raise XplikaError(f"dimension mismatch: CAV has {cav.vector.size} entries, layer {layer!r} has {math.prod(shape)}")
    return shape


def directional_derivatives(model: Model, layer: str, cav: CAV, examples, target: int) -> np.ndarray:
    _check_cav(model, layer, cav)
    out = []
    for x in examples:
        trace = forward(model, x, capture=[layer])
        grad = backward(model, trace, target)[layer]
        out.append(float(grad.reshape(-1) @ cav.vector))
    return np.array(out)


def tcav_score(model: Model, layer: str, cav: CAV, examples, target: int) -> float:
    """Fraction of examples whose target logit strictly increases along the CAV.

    A zero directional derivative counts as not positive.
    """
    examples = list(examples)
    if not examples:
        raise XplikaError("tcav_score needs at least one example")
    derivs = directional_derivatives(model, layer, cav, examples, target)
    return int(np.count_nonzero(derivs > 0.0)) / len(examples)


def cav_spatial_map(model: Model, x, layer: str, cav: CAV) -> AttributionMap:
    """Per-location agreement between a conv activation and the CAV.

    Cell ``(i, j)`` holds ``sum_c A[c, i, j] * v[c, i, j]``; the cells are
    kept in ``extras["grid"]`` and bilinearly upsampled to the input size.
    """
    if not isinstance(model.layer(layer), Conv2D):
        raise XplikaError(f"cav_spatial_map needs a conv2d layer, got {model.layer(layer).kind}")
    shape = _check_cav(model, layer, cav)
    x = np.asarray(x, dtype=np.float64)
    act = forward(model, x, capture=[layer]).captured[layer]
    cells = np.sum(act * cav.vector.reshape(shape), axis=0)
    up = grids.resize_bilinear(cells, x.shape[1:])
    return AttributionMap(grids.expand_spatial(up, x.shape), "cav_map", "", {"grid": cells})


def cav_objective(cav: CAV) -> Objective:
    """Direction objective on the CAV's layer, weight 1."""
    return Objective((direction(cav.layer, cav.vector, 1.0),))
