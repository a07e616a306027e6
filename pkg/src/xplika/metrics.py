"""Fidelity and stability metrics for attribution maps.

Scores are raw target logits. Rankings sort by attribution descending and
break ties by ascending flat index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attribution import MethodConfig, explain, resolve_baseline
from .engine import Model, score
from .errors import XplikaError
from .parallel import ordered_map
from .rng import Stream


@dataclass(frozen=True)
class FidelityCurve:
    fractions: np.ndarray
    scores: np.ndarray
    auc: float

    def as_array(self) -> np.ndarray:
        """The ``2 x (s+1)`` export layout: fractions row, then scores row."""
        return np.vstack([self.fractions, self.scores])


def trapezoid_auc(fractions: np.ndarray, scores: np.ndarray) -> float:
    return float(np.sum(np.diff(fractions) * (scores[1:] + scores[:-1]) / 2.0))


def ranking(attribution: np.ndarray) -> np.ndarray:
    """Flat indices from most to least important."""
    return np.argsort(-np.asarray(attribution, dtype=np.float64).reshape(-1), kind="stable")


def _check(model: Model, x, target, attribution):
    x = np.asarray(x, dtype=np.float64)
    attribution = np.asarray(attribution, dtype=np.float64)
    if attribution.shape != x.shape:
        raise XplikaError(f"map shape {attribution.shape} does not match input {x.shape}")
    if not 0 <= int(target) < model.output_dim:
        raise XplikaError(f"target {target} out of range")
    return x, int(target), attribution


def _curve(model, x, target, attribution, baseline, steps, insert: bool) -> FidelityCurve:
    if steps < 1:
        raise XplikaError("steps must be >= 1")
    x, target, attribution = _check(model, x, target, attribution)
    xb = resolve_baseline(baseline, x)
    order = ranking(attribution)
    n = x.size
    start, fill = (xb, x) if insert else (x, xb)

    def at(k):
        count = k * n // steps
        z = start.reshape(-1).copy()
        idx = order[:count]
        z[idx] = fill.reshape(-1)[idx]
        return score(model, z.reshape(x.shape), target)

    fractions = np.arange(steps + 1) / steps
    scores = np.array(ordered_map(at, steps + 1, min_chunk=8))
    return FidelityCurve(fractions, scores, trapezoid_auc(fractions, scores))


def deletion(model: Model, x, target: int, attribution, baseline=0.0, steps: int = 10) -> FidelityCurve:
    """Replace the highest-ranked elements with the baseline, a fraction at a time."""
    return _curve(model, x, target, attribution, baseline, steps, insert=False)


def insertion(model: Model, x, target: int, attribution, baseline=0.0, steps: int = 10) -> FidelityCurve:
    """Start from the baseline and restore the highest-ranked elements first."""
    return _curve(model, x, target, attribution, baseline, steps, insert=True)


def mu_fidelity(
    model: Model,
    x,
    target: int,
    attribution,
    subset_size: int | None = None,
    trials: int = 50,
    baseline=0.0,
    seed: int = 0,
) -> float:
    """Pearson correlation between subset attribution mass and score drop.

    Each trial draws a random subset ``S`` of ``subset_size`` elements
    (default ``ceil(0.2 * dim)``) and compares ``sum(map[S])`` with
    ``f(x) - f(x with S set to baseline)``.
    """
    x, target, attribution = _check(model, x, target, attribution)
    xb = resolve_baseline(baseline, x)
    n = x.size
    k = math.ceil(0.2 * n) if subset_size is None else int(subset_size)
    if not 1 <= k <= n:
        raise XplikaError(f"subset_size must lie in [1, {n}]")
    if trials < 3:
        raise XplikaError("trials must be >= 3")
    base = score(model, x, target)
    flat_map = attribution.reshape(-1)

    def trial(t):
        subset = Stream(seed, t).permutation(n)[:k]
        z = x.reshape(-1).copy()
        z[subset] = xb.reshape(-1)[subset]
        return flat_map[subset].sum(), base - score(model, z.reshape(x.shape), target)

    pairs = np.array(ordered_map(trial, trials, min_chunk=16))
    a, d = pairs[:, 0], pairs[:, 1]
    da, dd = a - a.mean(), d - d.mean()
    sa, sd = math.sqrt(float(da @ da)), math.sqrt(float(dd @ dd))
    # relative guards: exact-zero checks would miss round-off noise
    if sa <= 1e-12 * max(1.0, float(np.abs(a).max())) or sd <= 1e-12 * max(1.0, float(np.abs(d).max())):
        raise XplikaError("degenerate variance")
    return float(np.clip((da @ dd) / (sa * sd), -1.0, 1.0))


def average_stability(
    config: MethodConfig,
    model: Model,
    x,
    target: int,
    radius: float = 0.1,
    trials: int = 10,
    seed: int = 0,
) -> float:
    """Mean relative change of an explanation under uniform input noise.

    Averages ``||phi(x) - phi(x + delta)|| / ||phi(x)||`` over ``trials``
    draws of ``delta ~ U[-radius, radius]``. When ``||phi(x)||`` is below
    1e-12 the absolute distance is used instead.
    """
    if radius < 0:
        raise XplikaError("radius must be >= 0")
    if trials < 1:
        raise XplikaError("trials must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    ref = explain(model, x, target, config).values
    ref_norm = float(np.linalg.norm(ref))

    def trial(t):
        delta = Stream(seed, t).uniform(x.size, -radius, radius).reshape(x.shape)
        return float(np.linalg.norm(ref - explain(model, x + delta, target, config).values))

    # explainers parallelize internally; trials stay sequential
    dists = [trial(t) for t in range(trials)]
    total = 0.0
    for d in dists:
        total += d / ref_norm if ref_norm >= 1e-12 else d
    return total / trials
