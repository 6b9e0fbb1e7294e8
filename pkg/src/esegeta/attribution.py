"""Input-level attribution methods for wrapped segmentation (or classification) models.

Every method takes ``(model, target, x, ...)`` where ``x`` is a single input of shape
(1, C, *spatial) and ``target`` is either a wrapper (bound on the clean input here) or
an already-bound target. The frozen target is reused for every perturbed or path
evaluation inside one call. Methods return an :class:`AttributionMap` whose values
have exactly the shape of ``x``.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .models import INPUT_TAP, Model
from .runtime import CancelToken, checkpoint, sample_rng
from .tensor import Tensor
from .wrappers import BoundTarget

__all__ = [
    "AttributionMap",
    "AttributionError",
    "Baseline",
    "bind_target",
    "score",
    "score_batch",
    "input_gradients",
    "saliency",
    "input_x_gradient",
    "integrated_gradients",
    "smoothgrad",
    "guided_backprop",
    "deconvolution",
    "gradient_shap",
    "deeplift_rescale",
    "gradcam",
    "guided_gradcam",
    "scorecam",
    "occlusion",
    "feature_ablation",
    "feature_permutation",
    "shapley_value_sampling",
    "rise",
    "lime",
    "kernel_shap",
    "patch_groups",
]

DEFAULT_BATCH = 16


class AttributionError(RuntimeError):
    pass


@dataclass
class AttributionMap:
    values: np.ndarray
    method: str
    params: dict = field(default_factory=dict)
    target_class: Optional[int] = None
    elapsed_ms: float = 0.0

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class Baseline:
    """Reference input: zeros, a constant, or seeded Gaussian noise."""

    kind: str = "zeros"
    value: float = 0.0
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("zeros", "constant", "gaussian-noise"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")

    def materialize(self, shape, dtype=np.float32, index: int = 0) -> np.ndarray:
        if self.kind == "zeros":
            return np.zeros(shape, dtype=dtype)
        if self.kind == "constant":
            return np.full(shape, self.value, dtype=dtype)
        return sample_rng(self.seed, "baseline", index).normal(0.0, self.sigma, size=shape).astype(dtype)


BaselineLike = Union[None, float, np.ndarray, Baseline]


def _baseline(baseline: BaselineLike, x: np.ndarray, index: int = 0) -> np.ndarray:
    if baseline is None:
        return np.zeros_like(x)
    if isinstance(baseline, Baseline):
        return baseline.materialize(x.shape, x.dtype, index)
    b = np.asarray(baseline, dtype=x.dtype)
    if b.ndim == 0:
        return np.full_like(x, b)
    if b.shape != x.shape:
        raise ValueError(f"baseline shape {b.shape} != input shape {x.shape}")
    return b


def _check_input(model: Model, x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    x = x.astype(model.dtype, copy=False)
    if x.ndim < 2 or x.shape[0] != 1:
        raise ValueError(f"expected a single input of shape (1, C, ...), got {x.shape}")
    return x


def bind_target(model: Model, target, x: np.ndarray) -> BoundTarget:
    if isinstance(target, BoundTarget):
        return target
    out = model(Tensor(x, dtype=model.dtype))
    return target.bind(out.data)


def score(model: Model, bound: BoundTarget, x: np.ndarray) -> float:
    return float(bound.score_batch(model(Tensor(x, dtype=model.dtype)).data)[0])


def score_batch(
    model: Model,
    bound: BoundTarget,
    xs: np.ndarray,
    batch_size: int = DEFAULT_BATCH,
    cancel: Optional[CancelToken] = None,
) -> np.ndarray:
    """Scalar target for each of the stacked inputs ``xs`` (n, C, ...)."""
    out = np.empty(len(xs))
    for lo in range(0, len(xs), batch_size):
        checkpoint(cancel)
        chunk = xs[lo : lo + batch_size]
        out[lo : lo + len(chunk)] = bound.score_batch(model(Tensor(chunk, dtype=model.dtype)).data)
    return out


def input_gradients(
    model: Model,
    bound: BoundTarget,
    points: np.ndarray,
    policy: str = "standard",
    batch_size: int = DEFAULT_BATCH,
    cancel: Optional[CancelToken] = None,
) -> np.ndarray:
    """d score / d input at each stacked point (n, C, ...); float64.

    Points are batched; the summed target separates per sample.
    """
    grads = np.empty(points.shape, dtype=np.float64)
    for lo in range(0, len(points), batch_size):
        checkpoint(cancel)
        xt = Tensor(points[lo : lo + batch_size], requires_grad=True, dtype=model.dtype)
        s = bound.score(model(xt))
        (g,) = T.grad(s, [xt], policy=policy)
        if not np.all(np.isfinite(g)):
            raise AttributionError("non-finite gradient during backward pass")
        grads[lo : lo + len(g)] = g
    return grads


def _finish(method, values, x, bound, params, t0) -> AttributionMap:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != x.shape:
        raise AttributionError(f"{method}: map shape {values.shape} != input shape {x.shape}")
    if not np.all(np.isfinite(values)):
        raise AttributionError(f"{method}: non-finite attribution values")
    elapsed = (time.perf_counter() - t0) * 1e3
    return AttributionMap(values.astype(x.dtype), method, params, bound.cls, elapsed)


def _prepare(model, target, x):
    t0 = time.perf_counter()
    x = _check_input(model, x)
    return t0, x, bind_target(model, target, x)


# ---------------------------------------------------------------------------
# Gradient methods


def saliency(model, target, x, signed: bool = False, cancel=None) -> AttributionMap:
    """d score / dx; absolute value unless ``signed``."""
    t0, x, bound = _prepare(model, target, x)
    g = input_gradients(model, bound, x, cancel=cancel)
    return _finish("saliency", g if signed else np.abs(g), x, bound, {"signed": signed}, t0)


def input_x_gradient(model, target, x, cancel=None) -> AttributionMap:
    t0, x, bound = _prepare(model, target, x)
    g = input_gradients(model, bound, x, cancel=cancel)
    return _finish("input_x_gradient", x * g, x, bound, {}, t0)


def guided_backprop(model, target, x, cancel=None) -> AttributionMap:
    t0, x, bound = _prepare(model, target, x)
    g = input_gradients(model, bound, x, policy="guided", cancel=cancel)
    return _finish("guided_backprop", g, x, bound, {}, t0)


def deconvolution(model, target, x, cancel=None) -> AttributionMap:
    t0, x, bound = _prepare(model, target, x)
    g = input_gradients(model, bound, x, policy="deconv", cancel=cancel)
    return _finish("deconvolution", g, x, bound, {}, t0)


def integrated_gradients(
    model, target, x, baseline: BaselineLike = None, steps: int = 50, batch_size: int = DEFAULT_BATCH, cancel=None
) -> AttributionMap:
    """(x - x') times the midpoint-rule average gradient along the straight path."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    t0, x, bound = _prepare(model, target, x)
    b = _baseline(baseline, x)
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    delta = x.astype(np.float64) - b
    points = (b + alphas.reshape((-1,) + (1,) * (x.ndim - 1)) * delta).astype(x.dtype)
    g = input_gradients(model, bound, points, batch_size=batch_size, cancel=cancel)
    values = delta * g.mean(axis=0, keepdims=True)
    return _finish("integrated_gradients", values, x, bound, {"steps": steps}, t0)


_SMOOTH_INNER = ("saliency", "input_x_gradient", "guided_backprop")


def smoothgrad(
    model,
    target,
    x,
    inner: str = "saliency",
    n: int = 25,
    sigma: Optional[float] = None,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH,
    cancel=None,
) -> AttributionMap:
    """Mean of the inner map over ``n`` Gaussian-noised copies of x (mask frozen on clean x).

    ``sigma`` defaults to 0.15 x (max - min) of x.
    """
    if inner not in _SMOOTH_INNER:
        raise ValueError(f"smoothgrad inner method must be one of {_SMOOTH_INNER}")
    if n < 1:
        raise ValueError("n must be >= 1")
    t0, x, bound = _prepare(model, target, x)
    if sigma is None:
        sigma = 0.15 * float(x.max() - x.min())
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    params = {"inner": inner, "n": n, "sigma": sigma, "seed": seed}
    policy = "guided" if inner == "guided_backprop" else "standard"

    def inner_map(points, g):
        if inner == "saliency":
            return np.abs(g)
        if inner == "input_x_gradient":
            return points * g
        return g

    if sigma == 0:
        # all samples coincide with x
        g = input_gradients(model, bound, x, policy=policy, cancel=cancel)
        return _finish("smoothgrad", inner_map(x, g), x, bound, params, t0)
    noise = np.concatenate([sample_rng(seed, "smoothgrad", k).normal(0.0, sigma, size=x.shape) for k in range(n)])
    points = (x + noise).astype(x.dtype)
    g = input_gradients(model, bound, points, policy=policy, batch_size=batch_size, cancel=cancel)
    values = inner_map(points.astype(np.float64), g).mean(axis=0, keepdims=True)
    return _finish("smoothgrad", values, x, bound, params, t0)


def gradient_shap(
    model,
    target,
    x,
    baseline: BaselineLike = None,
    n: int = 50,
    sigma: float = 0.0,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH,
    cancel=None,
) -> AttributionMap:
    """Mean of (x - b) * grad at b + u (x - b) + N(0, sigma^2), u ~ U(0, 1), b ~ baseline."""
    if n < 1:
        raise ValueError("n must be >= 1")
    t0, x, bound = _prepare(model, target, x)
    xd = x.astype(np.float64)
    bs = np.concatenate([_baseline(baseline, x, k).astype(np.float64) for k in range(n)])
    points = np.empty(bs.shape)
    for k in range(n):
        rng = sample_rng(seed, "gradient_shap", k)
        u = rng.uniform()
        eps = rng.normal(0.0, sigma, size=x.shape[1:]) if sigma > 0 else 0.0
        points[k] = bs[k] + u * (xd[0] - bs[k]) + eps
    g = input_gradients(model, bound, points.astype(x.dtype), batch_size=batch_size, cancel=cancel)
    values = ((xd - bs) * g).mean(axis=0, keepdims=True)
    return _finish("gradient_shap", values, x, bound, {"n": n, "sigma": sigma, "seed": seed}, t0)


_DEEPLIFT_OK = {
    "conv1d", "conv2d", "conv3d", "linear", "add", "concat", "relu", "leaky-relu",
    "upsample-nearest", "upsample-linear", "select", "sum", "mean", "reshape",
}


def _graph_nodes(out: Tensor) -> list[Tensor]:
    return [t for t in T.topological_order(out) if t.node is not None]


def deeplift_rescale(model, target, x, baseline: BaselineLike = None, cancel=None) -> AttributionMap:
    """DeepLIFT with the rescale rule for ReLU-family units; linear ops pass multipliers through."""
    t0, x, bound = _prepare(model, target, x)
    b = _baseline(baseline, x)
    xt = Tensor(x, requires_grad=True, dtype=model.dtype)
    bt = Tensor(b, requires_grad=True, dtype=model.dtype)
    sx, sb = bound.score(model(xt)), bound.score(model(bt))
    nx, nb = _graph_nodes(sx), _graph_nodes(sb)
    for t in nx:
        kind = t.node.kind
        if kind == "mul" and (t.node.saved.get("linear") or "scalar" in t.node.saved):
            continue
        if kind not in _DEEPLIFT_OK:
            raise AttributionError(f"deeplift: unsupported op {kind!r} in model graph")
    if [t.node.kind for t in nx] != [t.node.kind for t in nb]:
        raise AttributionError("deeplift: input and baseline graphs differ in structure")
    checkpoint(cancel)

    multipliers = {}
    for tx, tb in zip(nx, nb):
        if tx.node.kind not in T.RELU_FAMILY:
            continue
        slope = tx.node.saved["slope"]
        ix, ib = tx.node.saved["input"], tb.node.saved["input"]
        ox, ob = np.where(ix > 0, ix, slope * ix), np.where(ib > 0, ib, slope * ib)
        din = ix - ib
        small = np.abs(din) <= 1e-7
        local = np.where(ix > 0, 1.0, slope)
        multipliers[id(tx.node)] = np.where(small, local, (ox - ob) / np.where(small, 1.0, din))

    def rule(node, g):
        return g * multipliers[id(node)]

    (m,) = T.grad(sx, [xt], relu_rule=rule)
    values = m * (x.astype(np.float64) - b)
    return _finish("deeplift", values, x, bound, {}, t0)


# ---------------------------------------------------------------------------
# CAM family


def _layer_activation_and_grad(model, bound, x, layer, policy="standard"):
    xt = Tensor(x, requires_grad=True, dtype=model.dtype)
    out, (tap,) = model.forward_with_taps(xt, [layer])
    s = bound.score(out)
    (g,) = T.grad(s, [tap.activation], policy=policy)
    return tap.activation.data.astype(np.float64), g


def _to_input_grid(cam: np.ndarray, x: np.ndarray, mode: str) -> np.ndarray:
    """Resize (1, 1, *layer_spatial) to the input spatial size and repeat across input channels."""
    up = T.resize(Tensor(cam, dtype=np.float64), x.shape[2:], mode).data
    return np.repeat(up, x.shape[1], axis=1)


def gradcam(model, target, x, layer: str, interpolation: str = "nearest", cancel=None) -> AttributionMap:
    """ReLU(sum_k w_k A_k) with w_k the spatial mean of d score / d A_k, resized to the input."""
    t0, x, bound = _prepare(model, target, x)
    A, g = _layer_activation_and_grad(model, bound, x, layer)
    if A.ndim < 3:
        raise AttributionError(f"gradcam: layer {layer!r} has no spatial dims (shape {A.shape})")
    spatial = tuple(range(2, A.ndim))
    weights = g.mean(axis=spatial, keepdims=True)
    cam = np.maximum((weights * A).sum(axis=1, keepdims=True), 0.0)
    values = _to_input_grid(cam, x, interpolation)
    return _finish("gradcam", values, x, bound, {"layer": layer, "interpolation": interpolation}, t0)


def guided_gradcam(model, target, x, layer: str, interpolation: str = "nearest", cancel=None) -> AttributionMap:
    t0, x, bound = _prepare(model, target, x)
    gb = guided_backprop(model, bound, x, cancel=cancel).values.astype(np.float64)
    cam = gradcam(model, bound, x, layer, interpolation, cancel=cancel).values.astype(np.float64)
    return _finish("guided_gradcam", gb * cam, x, bound, {"layer": layer}, t0)


def scorecam(
    model,
    target,
    x,
    layer: str,
    baseline: BaselineLike = None,
    batch_limit: int = DEFAULT_BATCH,
    interpolation: str = "nearest",
    cancel=None,
) -> AttributionMap:
    """ReLU(sum_k alpha_k up(A_k)), alpha_k = score(x * norm(up(A_k))) - score(baseline).

    Channels whose resized activation is constant are skipped (weight 0).
    """
    t0, x, bound = _prepare(model, target, x)
    _, (tap,) = model.forward_with_taps(Tensor(x, dtype=model.dtype), [layer])
    A = tap.activation.data.astype(np.float64)
    if A.ndim < 3:
        raise AttributionError(f"scorecam: layer {layer!r} has no spatial dims (shape {A.shape})")
    ups = T.resize(Tensor(A, dtype=np.float64), x.shape[2:], interpolation).data[0]
    keep, masks = [], []
    for k, up in enumerate(ups):
        lo, hi = up.min(), up.max()
        if hi > lo:
            keep.append(k)
            masks.append((up - lo) / (hi - lo))
    if not keep:
        raise AttributionError(f"scorecam: every activation map of layer {layer!r} is constant")
    masked = np.stack([x[0] * m[None] for m in masks]).astype(x.dtype)
    s = score_batch(model, bound, masked, batch_limit, cancel)
    s0 = score(model, bound, _baseline(baseline, x))
    alpha = s - s0
    cam = np.maximum(np.tensordot(alpha, ups[keep], axes=(0, 0)), 0.0)
    values = np.repeat(cam[None, None], x.shape[1], axis=1)
    return _finish("scorecam", values, x, bound, {"layer": layer, "skipped": len(ups) - len(keep)}, t0)


# ---------------------------------------------------------------------------
# Perturbation methods


def _per_dim(v, d: int, name: str) -> tuple:
    t = (int(v),) * d if np.isscalar(v) else tuple(int(i) for i in v)
    if len(t) != d:
        raise ValueError(f"{name} needs {d} entries, got {len(t)}")
    return t


def occlusion(
    model,
    target,
    x,
    window=4,
    stride=2,
    baseline: BaselineLike = None,
    batch_size: int = DEFAULT_BATCH,
    cancel=None,
) -> AttributionMap:
    """Coverage-averaged score drop when a sliding window (all channels) is replaced by the baseline."""
    t0, x, bound = _prepare(model, target, x)
    spatial = x.shape[2:]
    window = _per_dim(window, len(spatial), "window")
    stride = _per_dim(stride, len(spatial), "stride")
    if any(w > s or w < 1 for w, s in zip(window, spatial)):
        raise ValueError(f"window {window} larger than input extents {spatial}")
    if any(s < 1 for s in stride):
        raise ValueError("stride must be >= 1")
    b = _baseline(baseline, x)
    starts = [range(0, s - w + 1, st) for s, w, st in zip(spatial, window, stride)]
    placements = [
        (slice(None), slice(None)) + tuple(slice(o, o + w) for o, w in zip(offs, window))
        for offs in itertools.product(*starts)
    ]
    base_score = score(model, bound, x)
    total = np.zeros(x.shape)
    count = np.zeros(x.shape)
    for lo in range(0, len(placements), batch_size):
        chunk = placements[lo : lo + batch_size]
        xs = np.repeat(x, len(chunk), axis=0)
        for i, sl in enumerate(chunk):
            xs[(i,) + sl[1:]] = b[(0,) + sl[1:]]
        s = score_batch(model, bound, xs, batch_size, cancel)
        for i, sl in enumerate(chunk):
            total[sl] += base_score - s[i]
            count[sl] += 1
    values = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return _finish("occlusion", values, x, bound, {"window": window, "stride": stride}, t0)


def feature_ablation(
    model, target, x, groups: np.ndarray, baseline: BaselineLike = None, batch_size: int = DEFAULT_BATCH, cancel=None
) -> AttributionMap:
    """Each group g gets score(x) - score(x with g replaced by the baseline) on all its elements."""
    t0, x, bound = _prepare(model, target, x)
    groups = np.asarray(groups)
    if groups.shape != x.shape:
        raise ValueError(f"group mask shape {groups.shape} != input shape {x.shape}")
    ids = np.unique(groups)
    if ids.size == 0:
        raise ValueError("group mask contains no group ids")
    b = _baseline(baseline, x)
    base_score = score(model, bound, x)
    values = np.zeros(x.shape)
    for lo in range(0, len(ids), batch_size):
        chunk = ids[lo : lo + batch_size]
        xs = np.repeat(x, len(chunk), axis=0)
        for i, g in enumerate(chunk):
            sel = groups[0] == g
            xs[i][sel] = b[0][sel]
        s = score_batch(model, bound, xs, batch_size, cancel)
        for i, g in enumerate(chunk):
            values[groups == g] = base_score - s[i]
    return _finish("feature_ablation", values, x, bound, {"n_groups": int(ids.size)}, t0)


def feature_permutation(
    model, target, batch: Sequence[np.ndarray], seed: int = 0, groups: Optional[np.ndarray] = None, cancel=None
) -> list[AttributionMap]:
    """Per batch element: score(original) - score(with one feature shuffled across the batch).

    Each feature (element of C x spatial, or group id) gets its own seeded permutation;
    identity permutations are not excluded.
    """
    t0 = time.perf_counter()
    xs = [_check_input(model, b) for b in batch]
    if len(xs) < 2:
        raise ValueError("feature permutation needs a batch of at least 2 inputs")
    X = np.concatenate(xs)
    n = len(X)
    bounds = [bind_target(model, target, xi) for xi in xs]
    if groups is None:
        groups = np.arange(int(np.prod(X.shape[1:]))).reshape((1,) + X.shape[1:])
    groups = np.asarray(groups)
    if groups.shape != (1,) + X.shape[1:]:
        raise ValueError(f"group mask shape {groups.shape} != input shape {(1,) + X.shape[1:]}")

    def scores_of(batch_arr):
        out = model(Tensor(batch_arr, dtype=model.dtype)).data
        return np.array([bounds[i].score_batch(out[i : i + 1])[0] for i in range(n)])

    orig = scores_of(X)
    values = np.zeros(X.shape)
    for f in np.unique(groups):
        checkpoint(cancel)
        perm = sample_rng(seed, "feature_permutation", int(f)).permutation(n)
        sel = groups[0] == f
        Xp = X.copy()
        Xp[:, sel] = X[perm][:, sel]
        delta = orig - scores_of(Xp)
        values[:, sel] = delta[:, None]
    maps = []
    for i, xi in enumerate(xs):
        maps.append(_finish("feature_permutation", values[i : i + 1], xi, bounds[i], {"seed": seed}, t0))
    return maps


def _features(x: np.ndarray, groups: Optional[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if groups is None:
        groups = np.arange(x.size).reshape(x.shape)
    groups = np.asarray(groups)
    if groups.shape != x.shape:
        raise ValueError(f"group mask shape {groups.shape} != input shape {x.shape}")
    return groups, np.unique(groups)


def shapley_value_sampling(
    model,
    target,
    x,
    baseline: BaselineLike = None,
    n_permutations: int = 25,
    seed: int = 0,
    groups: Optional[np.ndarray] = None,
    permutations: Optional[Iterable[Sequence[int]]] = None,
    batch_size: int = DEFAULT_BATCH,
    cancel=None,
) -> AttributionMap:
    """Average marginal contribution over feature orderings, walking baseline -> x.

    ``permutations`` (positions into the sorted feature ids) overrides random sampling,
    e.g. to enumerate all orderings.
    """
    t0, x, bound = _prepare(model, target, x)
    groups, ids = _features(x, groups)
    M = len(ids)
    b = _baseline(baseline, x)
    if permutations is None:
        if n_permutations < 1:
            raise ValueError("n_permutations must be >= 1")
        perms = (sample_rng(seed, "shapley", j).permutation(M) for j in range(n_permutations))
    else:
        perms = (np.asarray(p) for p in permutations)
    masks = [groups[0] == g for g in ids]
    credit = np.zeros(M)
    used = 0
    for perm in perms:
        checkpoint(cancel)
        if sorted(perm.tolist()) != list(range(M)):
            raise ValueError("each permutation must order every feature exactly once")
        walk = np.repeat(b, M + 1, axis=0)
        cur = b[0].copy()
        for j, f in enumerate(perm, start=1):
            cur[masks[f]] = x[0][masks[f]]
            walk[j] = cur
        v = score_batch(model, bound, walk, batch_size, cancel)
        credit[perm] += np.diff(v)
        used += 1
    if used == 0:
        raise ValueError("no permutations supplied")
    credit /= used
    values = np.zeros(x.shape)
    for f, g in enumerate(ids):
        values[groups == g] = credit[f]
    return _finish("shapley_value_sampling", values, x, bound, {"n_permutations": used, "seed": seed}, t0)


def rise_masks(spatial: Sequence[int], n: int, p: float, grid: int, seed: int, start: int = 0) -> np.ndarray:
    """Smooth random masks: Bernoulli(p) grid, linear upsampling, random sub-cell shift."""
    d = len(spatial)
    cells = [math.ceil(s / grid) for s in spatial]
    big = [(grid + 1) * c for c in cells]
    out = np.empty((n,) + tuple(spatial))
    for j in range(n):
        rng = sample_rng(seed, "rise", start + j)
        g = (rng.uniform(size=(grid,) * d) < p).astype(np.float64)
        up = T.resize(Tensor(g[None, None], dtype=np.float64), big, "linear").data[0, 0]
        shift = [int(rng.integers(0, c)) for c in cells]
        out[j] = up[tuple(slice(o, o + s) for o, s in zip(shift, spatial))]
    return out


def rise(
    model,
    target,
    x,
    n_masks: int = 1000,
    p: float = 0.5,
    grid: int = 7,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH,
    cancel=None,
) -> AttributionMap:
    """sum_j score(x * M_j) M_j / (N p) over seeded smooth random masks."""
    if not 0 < p < 1:
        raise ValueError(f"invalid keep probability p={p}; need 0 < p < 1")
    if n_masks < 1:
        raise ValueError("n_masks must be >= 1")
    t0, x, bound = _prepare(model, target, x)
    spatial = x.shape[2:]
    if any(grid > s for s in spatial) or grid < 1:
        raise ValueError(f"mask grid {grid} exceeds input extents {spatial}")
    acc = np.zeros(spatial)
    for lo in range(0, n_masks, batch_size):
        checkpoint(cancel)
        m = rise_masks(spatial, min(batch_size, n_masks - lo), p, grid, seed, start=lo)
        xs = (x * m[:, None]).astype(x.dtype)
        s = score_batch(model, bound, xs, batch_size, cancel)
        acc += np.tensordot(s, m, axes=(0, 0))
    sal = acc / (n_masks * p)
    values = np.repeat(sal[None, None], x.shape[1], axis=1)
    return _finish("rise", values, x, bound, {"n_masks": n_masks, "p": p, "grid": grid, "seed": seed}, t0)


def patch_groups(x_shape: Sequence[int], patch_grid) -> np.ndarray:
    """Integer patch id per element: a regular grid over spatial dims, shared by all channels."""
    spatial = tuple(x_shape[2:])
    grid = _per_dim(patch_grid, len(spatial), "patch_grid")
    if any(g < 1 or g > s for g, s in zip(grid, spatial)):
        raise ValueError(f"patch grid {grid} does not partition spatial extents {spatial}")
    idx = [np.arange(s) * g // s for s, g in zip(spatial, grid)]
    ids = np.zeros(spatial, dtype=np.int64)
    for ax, (i, g) in enumerate(zip(idx, grid)):
        shape = [1] * len(spatial)
        shape[ax] = -1
        ids = ids * g + i.reshape(shape)
    return np.broadcast_to(ids, tuple(x_shape)).copy()


def _interpretable_inputs(x, b, groups, ids, Z):
    masks = [groups[0] == g for g in ids]
    xs = np.repeat(b, len(Z), axis=0)
    for i, z in enumerate(Z):
        for f in np.flatnonzero(z):
            xs[i][masks[f]] = x[0][masks[f]]
    return xs


def _paint(x, groups, ids, coef):
    values = np.zeros(x.shape)
    for f, g in enumerate(ids):
        values[groups == g] = coef[f]
    return values


def lime(
    model,
    target,
    x,
    patch_grid=4,
    n_samples: int = 200,
    kernel_width: float = 0.25,
    ridge: float = 1e-3,
    seed: int = 0,
    baseline: BaselineLike = None,
    groups: Optional[np.ndarray] = None,
    samples: Optional[np.ndarray] = None,
    batch_size: int = DEFAULT_BATCH,
    cancel=None,
) -> AttributionMap:
    """Weighted ridge surrogate on binary patch indicators; coefficients painted per patch.

    Proximity weight exp(-d^2 / width^2), d = cosine distance to the all-on vector.
    ``samples`` (n, M) overrides the random indicator draws.
    """
    if ridge <= 0:
        raise ValueError("ridge must be > 0")
    t0, x, bound = _prepare(model, target, x)
    groups = patch_groups(x.shape, patch_grid) if groups is None else np.asarray(groups)
    groups, ids = _features(x, groups)
    M = len(ids)
    if samples is None:
        if n_samples < M:
            raise ValueError(f"n_samples {n_samples} < number of patches {M}")
        Z = np.stack([sample_rng(seed, "lime", j).uniform(size=M) < 0.5 for j in range(n_samples)])
    else:
        Z = np.asarray(samples, dtype=bool)
    Z = Z.astype(np.float64)
    b = _baseline(baseline, x)
    y = score_batch(model, bound, _interpretable_inputs(x, b, groups, ids, Z).astype(x.dtype), batch_size, cancel)
    on = Z.sum(axis=1)
    cos = np.where(on > 0, on / np.sqrt(np.maximum(on, 1) * M), 0.0)
    dist = 1.0 - cos
    w = np.exp(-(dist**2) / kernel_width**2)
    design = np.hstack([np.ones((len(Z), 1)), Z])
    sw = np.sqrt(w)[:, None]
    reg = np.hstack([np.zeros((M, 1)), np.sqrt(ridge) * np.eye(M)])
    A = np.vstack([sw * design, reg])
    rhs = np.concatenate([sw[:, 0] * y, np.zeros(M)])
    beta = np.linalg.lstsq(A, rhs, rcond=None)[0]
    params = {"n_samples": len(Z), "kernel_width": kernel_width, "ridge": ridge, "seed": seed,
              "intercept": float(beta[0])}
    return _finish("lime", _paint(x, groups, ids, beta[1:]), x, bound, params, t0)


def shapley_kernel_weight(M: int, k: int) -> float:
    return (M - 1) / (math.comb(M, k) * k * (M - k))


def kernel_shap(
    model,
    target,
    x,
    patch_grid=4,
    n_samples: Optional[int] = None,
    ridge: float = 0.0,
    seed: int = 0,
    baseline: BaselineLike = None,
    groups: Optional[np.ndarray] = None,
    batch_size: int = DEFAULT_BATCH,
    cancel=None,
) -> AttributionMap:
    """Shapley-kernel weighted regression with sum(phi) = score(x) - score(baseline) enforced.

    ``n_samples=None`` (or at least 2^M - 2) enumerates every proper non-empty coalition.
    """
    t0, x, bound = _prepare(model, target, x)
    groups = patch_groups(x.shape, patch_grid) if groups is None else np.asarray(groups)
    groups, ids = _features(x, groups)
    M = len(ids)
    b = _baseline(baseline, x)
    ends = score_batch(model, bound, np.concatenate([b, x]).astype(x.dtype))
    f0, f1 = ends
    total = f1 - f0
    if M == 1:
        return _finish("kernel_shap", _paint(x, groups, ids, [total]), x, bound, {"M": 1}, t0)
    n_proper = 2**M - 2
    if n_samples is None or n_samples >= n_proper:
        Z = np.array([[(i >> f) & 1 for f in range(M)] for i in range(1, 2**M - 1)], dtype=np.float64)
    else:
        rows = []
        j = 0
        while len(rows) < n_samples:
            checkpoint(cancel)
            z = sample_rng(seed, "kernel_shap", j).uniform(size=M) < 0.5
            j += 1
            if 0 < z.sum() < M:
                rows.append(z)
        Z = np.array(rows, dtype=np.float64)
    sizes = Z.sum(axis=1).astype(int)
    w = np.array([shapley_kernel_weight(M, int(k)) for k in sizes])
    y = score_batch(model, bound, _interpretable_inputs(x, b, groups, ids, Z).astype(x.dtype), batch_size, cancel)
    # eliminate phi_M:  y - f0 - z_M * total = sum_{i<M} phi_i (z_i - z_M)
    target_y = y - f0 - Z[:, -1] * total
    design = Z[:, :-1] - Z[:, -1:]
    sw = np.sqrt(w)[:, None]
    A = sw * design
    rhs = sw[:, 0] * target_y
    if ridge > 0:
        A = np.vstack([A, np.sqrt(ridge) * np.eye(M - 1)])
        rhs = np.concatenate([rhs, np.zeros(M - 1)])
    phi_head = np.linalg.lstsq(A, rhs, rcond=None)[0]
    phi = np.append(phi_head, total - phi_head.sum())
    params = {"n_samples": len(Z), "ridge": ridge, "seed": seed, "M": M}
    return _finish("kernel_shap", _paint(x, groups, ids, phi), x, bound, params, t0)
