"""Quantitative metrics for attribution maps and the cascading-randomization check.

A ``method`` here is any callable ``method(model, target, x) -> AttributionMap``,
typically a ``functools.partial`` of an attribution function with its parameters
and seed fixed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .attribution import AttributionMap, _check_input, bind_target, score_batch
from .models import Model, default_stages
from .runtime import checkpoint, sample_rng

__all__ = [
    "EvalReport",
    "MetricError",
    "infidelity",
    "max_sensitivity",
    "spearman_rho",
    "cascading_randomization",
    "CascadeResult",
]

Method = Callable[..., AttributionMap]
SENSITIVITY_EPS = 1e-12


class MetricError(RuntimeError):
    pass


@dataclass
class EvalReport:
    method: str
    model: str
    infidelity: Optional[float] = None
    sensitivity: Optional[float] = None
    randomization: list = field(default_factory=list)  # [(stage name, rho), ...]
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["randomization"] = [{"stage": s, "rho": r} for s, r in self.randomization]
        return d


def _values(phi) -> np.ndarray:
    return np.asarray(phi.values if isinstance(phi, AttributionMap) else phi, dtype=np.float64)


def _value_range(x: np.ndarray) -> float:
    return float(np.max(x) - np.min(x))


def infidelity(
    model: Model, target, x, phi, n: int = 1000, sigma: Optional[float] = None, seed: int = 0,
    batch_size: int = 16, cancel=None,
) -> float:
    """Mean of (sum(I * phi) - (f(x) - f(x - I)))^2 over I ~ N(0, sigma^2) per element.

    sigma defaults to 0.1 * (max(x) - min(x)); the target region is frozen on clean x.
    """
    x = _check_input(model, x)
    phi = _values(phi)
    if phi.shape != x.shape:
        raise ValueError(f"attribution shape {phi.shape} != input shape {x.shape}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if sigma is None:
        sigma = 0.1 * _value_range(x)
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    bound = bind_target(model, target, x)
    f0 = score_batch(model, bound, x)[0]
    total = 0.0
    for lo in range(0, n, batch_size):
        checkpoint(cancel)
        ids = range(lo, min(n, lo + batch_size))
        pert = np.stack([sample_rng(seed, "infidelity", i).normal(0.0, sigma, size=x.shape[1:]) for i in ids])
        fx = score_batch(model, bound, (x.astype(np.float64) - pert).astype(x.dtype), batch_size)
        if not np.all(np.isfinite(fx)):
            raise MetricError("non-finite model score under perturbation")
        proj = (pert * phi).reshape(len(pert), -1).sum(axis=1)
        total += float(np.sum((proj - (f0 - fx)) ** 2))
    return total / n


def max_sensitivity(
    model: Model, target, method: Method, x, n: int = 10, radius: Optional[float] = None, seed: int = 0,
    cancel=None,
) -> float:
    """max_i ||phi(x + d_i) - phi(x)|| / max(eps, ||phi(x)||), d_i ~ U(-r, r) per element.

    The target is bound once on clean x and reused at every probe; r defaults to
    0.02 * (max(x) - min(x)).
    """
    x = _check_input(model, x)
    if n < 1:
        raise ValueError("n must be >= 1")
    if radius is None:
        radius = 0.02 * _value_range(x)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    bound = bind_target(model, target, x)
    base = _values(method(model, bound, x))
    denom = max(SENSITIVITY_EPS, float(np.linalg.norm(base)))
    worst = 0.0
    for i in range(n):
        checkpoint(cancel)
        if radius == 0:
            break
        d = sample_rng(seed, "sensitivity", i).uniform(-radius, radius, size=x.shape)
        probe = _values(method(model, bound, (x.astype(np.float64) + d).astype(x.dtype)))
        worst = max(worst, float(np.linalg.norm(probe - base)) / denom)
    return worst


def spearman_rho(a, b) -> float:
    """Rank correlation with average ranks for ties; 0 when either side is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ValueError(f"need two equal-length inputs of length >= 2, got {a.size} and {b.size}")
    if np.array_equal(a, b):
        return 1.0
    ra, rb = rankdata(a) - 0.5 * (a.size + 1), rankdata(b) - 0.5 * (b.size + 1)
    den = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if den == 0:
        return 0.0
    return float(np.clip(np.dot(ra, rb) / den, -1.0, 1.0))


@dataclass
class CascadeResult:
    stages: list  # stage names, starting with "none"
    rhos: list
    maps: list  # attribution arrays per stage

    def pairs(self) -> list:
        return list(zip(self.stages, self.rhos))


def cascading_randomization(
    model: Model, target, method: Method, x, stages: Optional[Sequence[Sequence[str]]] = None,
    seed: int = 0, stage_names: Optional[Sequence[str]] = None, cancel=None,
) -> CascadeResult:
    """Re-randomize cumulative groups of layers (output first) and compare |maps| by rank.

    Each stage recomputes the map on a fresh model copy; the target is re-bound to
    that model's own output.
    """
    x = _check_input(model, x)
    if stages is None:
        stages = default_stages(model)
        if stage_names is None and len(stages) == 3:
            stage_names = ["head", "decoder", "encoder"]
    stages = [list(s) for s in stages]
    known = set(model.param_layers())
    for group in stages:
        bad = [n for n in group if n not in known]
        if bad:
            raise KeyError(f"unknown stage layer(s): {bad}")
    names = list(stage_names) if stage_names is not None else [f"stage{k + 1}" for k in range(len(stages))]
    if len(names) != len(stages):
        raise ValueError("stage_names must match stages")

    ref = _values(method(model, target, x))
    maps, rhos, labels = [ref], [1.0], ["none"]
    reinit: list[str] = []
    for name, group in zip(names, stages):
        checkpoint(cancel)
        reinit += group
        m = model.reinit_layers(reinit, seed)
        cur = _values(method(m, target, x))
        maps.append(cur)
        rhos.append(spearman_rho(np.abs(cur), np.abs(ref)))
        labels.append(name)
    return CascadeResult(labels, rhos, maps)
