"""Layer-level attribution and input-optimisation methods."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attribution import (
    DEFAULT_BATCH,
    AttributionError,
    BaselineLike,
    _baseline,
    _check_input,
    bind_target,
)
from .models import Model
from .runtime import checkpoint, sample_rng
from .tensor import Tensor

__all__ = [
    "LayerAttributionMap",
    "layer_activation",
    "layer_gradient_x_activation",
    "layer_conductance",
    "internal_influence",
    "layer_gradient_shap",
    "excitation_backprop",
    "inverted_representation",
    "deepdream",
    "project_to_input",
]


@dataclass
class LayerAttributionMap:
    values: np.ndarray
    layer: str
    method: str
    params: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    elapsed_ms: float = 0.0

    @property
    def shape(self):
        return self.values.shape


def _done(method, layer, values, params, t0, dtype, trace=None) -> LayerAttributionMap:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise AttributionError(f"{method}: non-finite values")
    return LayerAttributionMap(
        values.astype(dtype), layer, method, params, list(trace or []), (time.perf_counter() - t0) * 1e3
    )


def _acts(model: Model, xs: np.ndarray, layer: str, batch_size: int = DEFAULT_BATCH, cancel=None) -> np.ndarray:
    parts = []
    for lo in range(0, len(xs), batch_size):
        checkpoint(cancel)
        _, (tap,) = model.forward_with_taps(Tensor(xs[lo : lo + batch_size], dtype=model.dtype), [layer])
        parts.append(tap.activation.data.astype(np.float64))
    return np.concatenate(parts)


def _layer_grads(model, bound, xs, layer, batch_size=DEFAULT_BATCH, cancel=None) -> tuple[np.ndarray, np.ndarray]:
    """(activations, d score / d activation) at each stacked input; per-sample via batching."""
    acts, grads = [], []
    for lo in range(0, len(xs), batch_size):
        checkpoint(cancel)
        xt = Tensor(xs[lo : lo + batch_size], requires_grad=True, dtype=model.dtype)
        out, (tap,) = model.forward_with_taps(xt, [layer])
        (g,) = T.grad(bound.score(out), [tap.activation])
        acts.append(tap.activation.data.astype(np.float64))
        grads.append(g)
    return np.concatenate(acts), np.concatenate(grads)


def layer_activation(model, x, layer: str) -> LayerAttributionMap:
    t0 = time.perf_counter()
    x = _check_input(model, x)
    _, (tap,) = model.forward_with_taps(Tensor(x, dtype=model.dtype), [layer])
    return _done("layer_activation", layer, tap.activation.data, {}, t0, model.dtype)


def layer_gradient_x_activation(model, target, x, layer: str, cancel=None) -> LayerAttributionMap:
    t0 = time.perf_counter()
    x = _check_input(model, x)
    bound = bind_target(model, target, x)
    A, g = _layer_grads(model, bound, x, layer, cancel=cancel)
    return _done("layer_gradient_x_activation", layer, A * g, {}, t0, model.dtype)


def _path(x, b, alphas):
    shape = (-1,) + (1,) * (x.ndim - 1)
    return (b + alphas.reshape(shape) * (x.astype(np.float64) - b)).astype(x.dtype)


def layer_conductance(
    model, target, x, layer: str, baseline: BaselineLike = None, steps: int = 50,
    batch_size: int = DEFAULT_BATCH, cancel=None,
) -> LayerAttributionMap:
    """sum_k dF/dA(mid_k) * (A(p_{k+1}) - A(p_k)) over m equal steps from baseline to x.

    Gradients are taken at segment midpoints, so the input "layer" reproduces
    integrated gradients exactly.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    t0 = time.perf_counter()
    x = _check_input(model, x)
    bound = bind_target(model, target, x)
    b = _baseline(baseline, x)
    nodes = _acts(model, _path(x, b, np.arange(steps + 1) / steps), layer, batch_size, cancel)
    _, g = _layer_grads(model, bound, _path(x, b, (np.arange(steps) + 0.5) / steps), layer, batch_size, cancel)
    values = (g * np.diff(nodes, axis=0)).sum(axis=0, keepdims=True)
    return _done("layer_conductance", layer, values, {"steps": steps}, t0, model.dtype)


def internal_influence(
    model, target, x, layer: str, baseline: BaselineLike = None, steps: int = 50,
    batch_size: int = DEFAULT_BATCH, cancel=None,
) -> LayerAttributionMap:
    """Midpoint-rule average of dF/dA along the straight input path."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    t0 = time.perf_counter()
    x = _check_input(model, x)
    bound = bind_target(model, target, x)
    b = _baseline(baseline, x)
    _, g = _layer_grads(model, bound, _path(x, b, (np.arange(steps) + 0.5) / steps), layer, batch_size, cancel)
    return _done("internal_influence", layer, g.mean(axis=0, keepdims=True), {"steps": steps}, t0, model.dtype)


def layer_gradient_shap(
    model, target, x, layer: str, baseline: BaselineLike = None, n: int = 50, sigma: float = 0.0,
    seed: int = 0, batch_size: int = DEFAULT_BATCH, cancel=None,
) -> LayerAttributionMap:
    """Mean of (A(x) - A(b)) * dF/dA at b + u (x - b) + N(0, sigma^2)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    t0 = time.perf_counter()
    x = _check_input(model, x)
    bound = bind_target(model, target, x)
    xd = x.astype(np.float64)
    bs = np.concatenate([_baseline(baseline, x, k).astype(np.float64) for k in range(n)])
    points = np.empty(bs.shape)
    for k in range(n):
        rng = sample_rng(seed, "layer_gradient_shap", k)
        u = rng.uniform()
        eps = rng.normal(0.0, sigma, size=x.shape[1:]) if sigma > 0 else 0.0
        points[k] = bs[k] + u * (xd[0] - bs[k]) + eps
    _, g = _layer_grads(model, bound, points.astype(x.dtype), layer, batch_size, cancel)
    ax = _acts(model, x, layer)
    ab = _acts(model, bs.astype(x.dtype), layer, batch_size, cancel)
    values = ((ax - ab) * g).mean(axis=0, keepdims=True)
    return _done("layer_gradient_shap", layer, values, {"n": n, "sigma": sigma, "seed": seed}, t0, model.dtype)


# ---------------------------------------------------------------------------
# Excitation backprop


def _conv_transpose(P: np.ndarray, inp_shape, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    probe = Tensor(np.zeros(inp_shape), requires_grad=True, dtype=np.float64)
    z = T.conv(probe, Tensor(w, dtype=np.float64), stride=stride, padding=padding)
    (g,) = T.grad(z, [probe], seed=P)
    return g


def _redistribute(P, xpos, wpos, fwd, bwd):
    """Share each child's probability among parents in proportion to w+ * x+.

    Children whose denominator vanishes fall back to w+ alone, then to uniform.
    """
    out = np.zeros(xpos.shape)
    remaining = P
    for weights, kernel in ((xpos, wpos), (np.ones(xpos.shape), wpos), (np.ones(xpos.shape), np.ones(wpos.shape))):
        Z = fwd(weights, kernel)
        ok = Z > 0
        share = np.where(ok, remaining / np.where(ok, Z, 1.0), 0.0)
        out += weights * bwd(share, kernel)
        remaining = np.where(ok, 0.0, remaining)
        if not remaining.any():
            break
    return out


def excitation_backprop(model, target, x, layer: str, cancel=None) -> LayerAttributionMap:
    """Top-down winning probabilities (non-contrastive), from the target region down to `layer`.

    Unit probability is spread uniformly over the target's region of the selected output
    channel. At conv/linear nodes a child passes probability to parents in proportion
    to w+ x+ (bias ignored); ReLU-family nodes pass it through; max-pool routes it to the
    max, resampling and concat follow their (row-stochastic) linear maps.
    """
    t0 = time.perf_counter()
    x = _check_input(model, x)
    bound = bind_target(model, target, x)
    xt = Tensor(x, requires_grad=True, dtype=model.dtype)
    out, (tap,) = model.forward_with_taps(xt, [layer])
    seed = np.zeros(out.shape)
    region = np.ones(out.shape[:1] + out.shape[2:]) if bound.region is None else np.broadcast_to(
        bound.region, out.shape[:1] + out.shape[2:]
    )
    if region.sum() <= 0:
        raise AttributionError("excitation_backprop: target region is empty")
    seed[:, bound.channel] = region / region.sum()

    probs = {out.uid: seed}
    for t in reversed(T.topological_order(out)):
        checkpoint(cancel)
        P = probs.get(t.uid)
        if P is None or t.node is None or t.uid == tap.activation.uid:
            continue
        node = t.node
        kind = node.kind
        if kind.startswith("conv"):
            inp, w = node.inputs[0], node.inputs[1]
            st, pad = node.saved["stride"], node.saved["padding"]
            parts = [
                _redistribute(
                    P,
                    np.maximum(inp.data.astype(np.float64), 0.0),
                    np.maximum(w.data.astype(np.float64), 0.0),
                    lambda a, k: T.conv(Tensor(a, dtype=np.float64), Tensor(k, dtype=np.float64), stride=st, padding=pad).data,
                    lambda s, k: _conv_transpose(s, inp.shape, k, st, pad),
                )
            ]
        elif kind == "linear":
            inp, w = node.inputs[0], node.inputs[1]
            parts = [
                _redistribute(
                    P,
                    np.maximum(inp.data.astype(np.float64), 0.0),
                    np.maximum(w.data.astype(np.float64), 0.0),
                    lambda a, k: a @ k.T,
                    lambda s, k: s @ k,
                )
            ]
        elif kind in T.RELU_FAMILY or kind == "reshape":
            parts = [P.reshape(node.inputs[0].shape)]
        elif kind in ("maxpool", "upsample-nearest", "upsample-linear", "concat"):
            parts = list(node.backward_fn(P))
        else:
            raise AttributionError(f"excitation_backprop: unsupported op {kind!r}")
        for parent, pp in zip(node.inputs, parts):
            if pp is None or not parent.requires_grad:
                continue
            probs[parent.uid] = pp if parent.uid not in probs else probs[parent.uid] + pp
    values = probs.get(tap.activation.uid, np.zeros(tap.activation.shape))
    return _done("excitation_backprop", layer, values, {}, t0, model.dtype)


# ---------------------------------------------------------------------------
# Input optimisation


MAX_HALVINGS = 20


def _optimise(objective, x0, iters, step, direction, cancel):
    """Gradient steps with backtracking: halve the step until the objective improves.

    direction=-1 minimises, +1 maximises. Returns (x, objective trace).
    """
    x = np.array(x0, dtype=np.float64)
    val, g = objective(x)
    trace = [val]
    for it in range(iters):
        checkpoint(cancel)
        if not np.any(g):
            trace.append(val)
            continue
        s = step
        for _ in range(MAX_HALVINGS + 1):
            cand = x + direction * s * g
            cv, cg = objective(cand)
            if not np.isfinite(cv):
                raise AttributionError(f"objective diverged (non-finite) at iteration {it}")
            if (cv < val) if direction < 0 else (cv > val):
                x, val, g = cand, cv, cg
                break
            s *= 0.5
        trace.append(val)
    return x, trace


def inverted_representation(
    model, target_acts: np.ndarray, layer: str, input_shape: Sequence[int], iters: int = 100,
    step: float = 0.1, lam: float = 0.0, seed: int = 0, init_scale: float = 0.1, cancel=None,
) -> LayerAttributionMap:
    """Minimise ||A_layer(x) - target||^2 + lam ||x||^2 from seeded noise; returns the final x."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    t0 = time.perf_counter()
    target = np.asarray(target_acts, dtype=np.float64)

    def objective(xv):
        xt = Tensor(xv, requires_grad=True, dtype=np.float64)
        _, (tap,) = model.forward_with_taps(xt, [layer])
        if tap.activation.shape != target.shape:
            raise ValueError(f"target activations {target.shape} != layer shape {tap.activation.shape}")
        diff = T.sub(tap.activation, Tensor(target, dtype=np.float64))
        loss = T.tsum(T.mul(diff, diff))
        if lam:
            loss = T.add(loss, T.mul(T.tsum(T.mul(xt, xt)), lam))
        (g,) = T.grad(loss, [xt])
        return float(loss.data), g

    x0 = sample_rng(seed, "inverted_representation").normal(0.0, init_scale, size=tuple(input_shape))
    x, trace = _optimise(objective, x0, iters, step, -1, cancel)
    params = {"iters": iters, "step": step, "lam": lam, "seed": seed}
    return _done("inverted_representation", layer, x, params, t0, model.dtype, trace)


def deepdream(
    model, x0: np.ndarray, layer: str, iters: int = 20, step: float = 0.1, seed: int = 0, cancel=None
) -> LayerAttributionMap:
    """Gradient ascent on mean(A_layer(x)^2) starting from x0; returns the final x.

    ``seed`` is recorded for provenance; the ascent itself is deterministic.
    """
    t0 = time.perf_counter()

    def objective(xv):
        xt = Tensor(xv, requires_grad=True, dtype=np.float64)
        _, (tap,) = model.forward_with_taps(xt, [layer])
        obj = T.mean(T.mul(tap.activation, tap.activation))
        if not obj.requires_grad:
            return float(obj.data), np.zeros(xv.shape)
        (g,) = T.grad(obj, [xt])
        return float(obj.data), g

    x, trace = _optimise(objective, x0, iters, step, +1, cancel)
    return _done("deepdream", layer, x, {"iters": iters, "step": step, "seed": seed}, t0, model.dtype, trace)


def project_to_input(values: np.ndarray, input_shape: Sequence[int]) -> np.ndarray:
    """Channel-mean of a layer-shaped map, nearest-resized to the input grid and repeated per input channel."""
    values = np.asarray(values, dtype=np.float64)
    input_shape = tuple(input_shape)
    if values.shape == input_shape:
        return values
    if values.ndim != len(input_shape):
        raise ValueError(f"cannot project layer map {values.shape} onto input {input_shape}")
    m = values.mean(axis=1, keepdims=True)
    up = T.resize(Tensor(m, dtype=np.float64), input_shape[2:], "nearest").data
    return np.repeat(up, input_shape[1], axis=1)
