"""Dense tensors with reverse-mode automatic differentiation.

Storage is float32 by default (float64 is accepted for gradient checking);
every op computes in float64 and rounds the result back to the storage dtype.
ReLU-family backward rules can be swapped per pass through a backward policy
("standard", "guided", "deconv") or an explicit rule callable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "BackwardPolicy",
    "ShapeError",
    "GradientError",
    "RELU_FAMILY",
    "conv",
    "maxpool",
    "upsample",
    "resize",
    "relu",
    "leaky_relu",
    "sigmoid",
    "softmax",
    "add",
    "sub",
    "mul",
    "concat",
    "linear",
    "tsum",
    "mean",
    "reshape",
    "select",
    "forward_op",
    "backward",
    "grad",
    "grad_check",
    "grad_check_report",
    "GradCheckReport",
    "topological_order",
]

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_ids = itertools.count()

RELU_FAMILY = frozenset({"relu", "leaky-relu"})


class ShapeError(ValueError):
    """Raised when op inputs have non-conforming shapes."""


class GradientError(RuntimeError):
    """Raised when a backward pass cannot be performed."""


@dataclass(frozen=True)
class BackwardPolicy:
    mode: str = "standard"

    def __post_init__(self):
        if self.mode not in ("standard", "guided", "deconv"):
            raise ValueError(f"unknown backward policy {self.mode!r}")


@dataclass(eq=False)
class Node:
    """One recorded op in the autodiff graph."""

    kind: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], tuple]
    saved: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "uid")

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else _storage_dtype(data))
        if arr.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.uid = next(_ids)

    @classmethod
    def _result(cls, data: np.ndarray, dtype, node: Optional[Node]) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(data).astype(dtype, copy=False)
        t.requires_grad = node is not None
        t.grad = None
        t.node = node
        t.uid = next(_ids)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f", kind={self.node.kind}" if self.node else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def _storage_dtype(data):
    if isinstance(data, Tensor):
        return data.dtype
    return np.float32


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _out_dtype(*tensors: Tensor):
    return np.result_type(*(t.dtype for t in tensors))


def _track(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _make(kind, out, inputs, backward_fn, dtype, saved=None) -> Tensor:
    node = None
    if _track(*inputs):
        node = Node(kind, tuple(inputs), backward_fn, saved or {})
    return Tensor._result(out, dtype, node)


# ---------------------------------------------------------------------------
# Convolution


def _window_cols(xp: np.ndarray, ksize: tuple, stride: int) -> tuple[np.ndarray, tuple]:
    d = len(ksize)
    spatial = tuple(range(2, 2 + d))
    win = np.lib.stride_tricks.sliding_window_view(xp, ksize, axis=spatial)
    win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * d]
    out_sz = win.shape[2 : 2 + d]
    # (B, C, *out, *k) -> (B, C, *k, *out)
    order = (0, 1) + tuple(range(2 + d, 2 + 2 * d)) + spatial
    cols = win.transpose(order).reshape(xp.shape[0], -1, int(np.prod(out_sz)))
    return cols, out_sz


def conv(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """N-d cross-correlation; 2D for 4-d inputs, 3D for 5-d inputs."""
    x, w = _as_tensor(x), _as_tensor(w)
    d = x.ndim - 2
    kind = f"conv{d}d"
    if d not in (1, 2, 3) or w.ndim != x.ndim:
        raise ShapeError(f"{kind}: input ndim {x.ndim} and kernel ndim {w.ndim} must agree (B,C,spatial...)")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"{kind}: input channels {x.shape[1]} != kernel in-channels {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"{kind}: stride must be >= 1 and padding >= 0")
    ksize = w.shape[2:]
    padded = tuple(s + 2 * padding for s in x.shape[2:])
    if any(k > s for k, s in zip(ksize, padded)):
        raise ShapeError(f"{kind}: kernel {ksize} larger than padded input {padded}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"{kind}: bias shape {b.shape} != ({w.shape[0]},)")

    pads = [(0, 0), (0, 0)] + [(padding, padding)] * d
    xp = np.pad(_f64(x), pads)
    cols, out_sz = _window_cols(xp, ksize, stride)
    wmat = _f64(w).reshape(w.shape[0], -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += _f64(b)[None, :, None]
    out = out.reshape((x.shape[0], w.shape[0]) + tuple(out_sz))

    inputs = (x, w) if b is None else (x, w, b)

    def backward_fn(g):
        g2 = g.reshape(g.shape[0], g.shape[1], -1)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape((x.shape[0], x.shape[1]) + tuple(ksize) + tuple(out_sz))
            gxp = np.zeros(xp.shape)
            for offs in itertools.product(*(range(k) for k in ksize)):
                sl = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offs, out_sz))
                gxp[(slice(None), slice(None)) + sl] += dcols[(slice(None), slice(None)) + offs]
            crop = tuple(slice(padding, padding + s) for s in x.shape[2:])
            gx = gxp[(slice(None), slice(None)) + crop]
        if w.requires_grad:
            gw = np.einsum("bon,bkn->ok", g2, cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw) if b is None else (gx, gw, gb)

    saved = {"stride": stride, "padding": padding}
    return _make(kind, out, inputs, backward_fn, _out_dtype(*inputs), saved)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x (B, N) @ w.T (O, N) + b (O,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    xd, wd = _f64(x), _f64(w)
    out = xd @ wd.T
    if b is not None:
        out = out + _f64(b)
    inputs = (x, w) if b is None else (x, w, b)

    def backward_fn(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return _make("linear", out, inputs, backward_fn, _out_dtype(*inputs))


# ---------------------------------------------------------------------------
# Pooling and resampling


def maxpool(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling (kernel == stride == k)."""
    x = _as_tensor(x)
    d = x.ndim - 2
    if d < 1 or any(s % k for s in x.shape[2:]):
        raise ShapeError(f"maxpool: spatial dims {x.shape[2:]} not divisible by kernel {k}")
    B, C = x.shape[:2]
    out_sz = tuple(s // k for s in x.shape[2:])
    split = (B, C) + tuple(v for s in out_sz for v in (s, k))
    order = (0, 1) + tuple(2 + 2 * i for i in range(d)) + tuple(3 + 2 * i for i in range(d))
    blocks = _f64(x).reshape(split).transpose(order).reshape((B, C) + out_sz + (k**d,))
    idx = np.argmax(blocks, axis=-1)  # first maximal element on ties
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        inv = np.argsort(order)
        gb = gb.reshape((B, C) + out_sz + (k,) * d).transpose(inv).reshape(x.shape)
        return (gb,)

    return _make("maxpool", out, (x,), backward_fn, x.dtype, {"k": k, "argmax": idx})


def _interp_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    if mode == "nearest":
        src = np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)
        m[np.arange(n_out), src] = 1.0
        return m
    # half-pixel centres, edge-clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def _apply_axes(a: np.ndarray, mats: Sequence[np.ndarray], transpose: bool = False) -> np.ndarray:
    for i, m in enumerate(mats):
        ax = 2 + i
        mm = m.T if transpose else m
        a = np.moveaxis(np.tensordot(mm, a, axes=([1], [ax])), 0, ax)
    return a


def resize(x: Tensor, size: Sequence[int], mode: str = "nearest") -> Tensor:
    """Resample spatial dims to `size` with a separable nearest or linear kernel."""
    x = _as_tensor(x)
    if mode not in ("nearest", "linear"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    size = tuple(int(s) for s in size)
    if len(size) != x.ndim - 2 or any(s < 1 for s in size):
        raise ShapeError(f"upsample-{mode}: target size {size} does not match spatial dims {x.shape[2:]}")
    mats = [_interp_matrix(n_in, n_out, mode) for n_in, n_out in zip(x.shape[2:], size)]
    out = _apply_axes(_f64(x), mats)

    def backward_fn(g):
        return (_apply_axes(g, mats, transpose=True),)

    return _make(f"upsample-{mode}", out, (x,), backward_fn, x.dtype, {"mats": mats})


def upsample(x: Tensor, factor: int = 2, mode: str = "nearest") -> Tensor:
    x = _as_tensor(x)
    return resize(x, [s * factor for s in x.shape[2:]], mode)


# ---------------------------------------------------------------------------
# Pointwise


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0, kind="relu")


def leaky_relu(x: Tensor, slope: float = 0.01, kind: str = "leaky-relu") -> Tensor:
    x = _as_tensor(x)
    xd = _f64(x)
    out = np.where(xd > 0, xd, slope * xd)

    def backward_fn(g):
        return (g * np.where(xd > 0, 1.0, slope),)

    return _make(kind, out, (x,), backward_fn, x.dtype, {"input": xd, "slope": slope})


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * _f64(x)))

    def backward_fn(g):
        return (g * s * (1.0 - s),)

    return _make("sigmoid", s, (x,), backward_fn, x.dtype)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    x = _as_tensor(x)
    xd = _f64(x)
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        # Jacobian-vector product; never materialises the Jacobian
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (x,), backward_fn, x.dtype, {"axis": axis})


def _binary(kind: str, a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        if not np.isscalar(b):
            raise ShapeError(f"{kind}: only Python scalars broadcast; got {type(b).__name__}")
        return a, float(b)
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary("add", a, b)
    if not isinstance(b, Tensor):
        return _make("add", _f64(a) + b, (a,), lambda g: (g,), a.dtype, {"scalar": b})
    out = _f64(a) + _f64(b)
    return _make("add", out, (a, b), lambda g: (g, g), _out_dtype(a, b))


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, mul(b, -1.0))
    return add(a, -float(b))


def mul(a, b) -> Tensor:
    a, b = _binary("mul", a, b)
    if not isinstance(b, Tensor):
        return _make("mul", _f64(a) * b, (a,), lambda g: (g * b,), a.dtype, {"scalar": b})
    ad, bd = _f64(a), _f64(b)

    def backward_fn(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    # product with a constant operand is linear in the tracked one
    linear_in = not (a.requires_grad and b.requires_grad)
    return _make("mul", ad * bd, (a, b), backward_fn, _out_dtype(a, b), {"linear": linear_in})


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ outside axis {axis}")
    out = np.concatenate([_f64(t) for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward_fn(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make("concat", out, tensors, backward_fn, _out_dtype(*tensors), {"axis": axis, "bounds": bounds})


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _f64(x).sum()
    return _make("sum", out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), x.dtype)


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    out = _f64(x).sum() / n
    return _make("mean", out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), x.dtype)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = _f64(x).reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),), x.dtype)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Pick one index along `axis`, dropping that axis."""
    x = _as_tensor(x)
    if not 0 <= index < x.shape[axis]:
        raise ShapeError(f"select: index {index} out of range for axis {axis} of {x.shape}")
    out = np.take(_f64(x), index, axis=axis)

    def backward_fn(g):
        full = np.zeros(x.shape)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _make("select", out, (x,), backward_fn, x.dtype, {"axis": axis, "index": index})


_FORWARD = {
    "conv2d": conv,
    "conv3d": conv,
    "maxpool": maxpool,
    "upsample-nearest": lambda x, factor=2: upsample(x, factor, "nearest"),
    "upsample-linear": lambda x, factor=2: upsample(x, factor, "linear"),
    "relu": relu,
    "leaky-relu": leaky_relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "add": add,
    "mul": mul,
    "concat": lambda *ts, axis=1: concat(ts, axis),
    "linear": linear,
    "sum": tsum,
    "mean": mean,
}


def forward_op(kind: str, inputs: Sequence, **params) -> Tensor:
    """Dispatch an op by kind name."""
    if kind not in _FORWARD:
        raise ValueError(f"unknown op kind {kind!r}")
    expect = {"conv2d": 4, "conv3d": 5}.get(kind)
    if expect is not None and _as_tensor(inputs[0]).ndim != expect:
        raise ShapeError(f"{kind}: expected a {expect}-d input, got shape {_as_tensor(inputs[0]).shape}")
    return _FORWARD[kind](*inputs, **params)


# ---------------------------------------------------------------------------
# Backward


def topological_order(output: Tensor) -> list[Tensor]:
    """Tensors reachable from `output` through recorded nodes, inputs before consumers."""
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if t.uid in seen:
            continue
        seen.add(t.uid)
        stack.append((t, True))
        if t.node is not None:
            for parent in reversed(t.node.inputs):
                if parent.requires_grad and parent.uid not in seen:
                    stack.append((parent, False))
    return order


def _policy_rule(mode: str) -> Callable[[Node, np.ndarray], np.ndarray]:
    def rule(node: Node, g: np.ndarray) -> np.ndarray:
        xin, slope = node.saved["input"], node.saved["slope"]
        if mode == "standard":
            return g * np.where(xin > 0, 1.0, slope)
        if mode == "guided":
            return np.where((xin > 0) & (g >= 0), g, 0.0)
        return np.maximum(g, 0.0)

    return rule


RuleFn = Callable[[Node, np.ndarray], Optional[np.ndarray]]


def grad(
    output: Tensor,
    wrt: Iterable[Tensor],
    seed: Optional[np.ndarray] = None,
    policy: BackwardPolicy | str = "standard",
    relu_rule: Optional[RuleFn] = None,
) -> list[np.ndarray]:
    """Gradients (float64) of `output` with respect to arbitrary graph tensors.

    `relu_rule(node, g)` overrides the backward of ReLU-family nodes; returning
    None falls back to the policy rule.
    """
    wrt = list(wrt)
    mode = policy.mode if isinstance(policy, BackwardPolicy) else BackwardPolicy(policy).mode
    if not output.requires_grad:
        raise GradientError("output is detached: no input in its graph requires grad")
    if seed is None:
        if output.data.size != 1:
            raise GradientError(f"non-scalar output of shape {output.shape} needs an explicit seed gradient")
        seed = np.ones(output.shape)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise GradientError(f"seed shape {seed.shape} != output shape {output.shape}")

    policy_rule = _policy_rule(mode)
    grads: dict[int, np.ndarray] = {output.uid: seed}
    for t in reversed(topological_order(output)):
        g = grads.get(t.uid)
        if g is None or t.node is None:
            continue
        node = t.node
        if node.kind in RELU_FAMILY:
            gi = relu_rule(node, g) if relu_rule is not None else None
            parts = (policy_rule(node, g) if gi is None else gi,)
        else:
            parts = node.backward_fn(g)
        for parent, gp in zip(node.inputs, parts):
            if gp is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.uid)
            grads[parent.uid] = gp if prev is None else prev + gp
    return [grads.get(t.uid, np.zeros(t.shape)) for t in wrt]


def backward(
    output: Tensor,
    policy: BackwardPolicy | str = "standard",
    seed: Optional[np.ndarray] = None,
) -> None:
    """Populate `.grad` on every leaf reachable from `output` that requires grad."""
    leaves = [t for t in topological_order(output) if t.node is None and t.requires_grad]
    if output.node is None and output.requires_grad:
        leaves = [output]
    for leaf, g in zip(leaves, grad(output, leaves, seed=seed, policy=policy)):
        g = g.astype(leaf.dtype)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def _numeric_grad(model_fn, base: np.ndarray, epsilon: float, on_probe=None) -> np.ndarray:
    numeric = np.zeros(base.shape)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        vals = []
        for sign in (1.0, -1.0):
            probe = base.copy().reshape(-1)
            probe[i] += sign * epsilon
            out = model_fn(Tensor(probe.reshape(base.shape), dtype=base.dtype))
            v = float(out.data)
            if not np.isfinite(v):
                raise GradientError(f"non-finite model output while probing element {i}")
            if on_probe is not None:
                on_probe(i, out)
            vals.append(v)
        # the probe is rounded to storage precision; divide by the step actually taken
        hi = np.array(base.reshape(-1)[i] + epsilon, dtype=base.dtype)
        lo = np.array(base.reshape(-1)[i] - epsilon, dtype=base.dtype)
        flat[i] = (vals[0] - vals[1]) / (float(hi) - float(lo))
    return numeric


def _analytic(model_fn, base):
    xt = Tensor(base, requires_grad=True, dtype=base.dtype)
    out = model_fn(xt)
    if out.data.size != 1:
        raise GradientError("model_fn must return a scalar")
    if not out.requires_grad:
        return np.zeros(base.shape), out
    (g,) = grad(out, [xt])
    return g, out


def _rel_error(analytic, numeric) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))


def grad_check(model_fn: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-3) -> float:
    """Max relative error between the analytic gradient and central differences."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    base = np.array(x.data)
    analytic, _ = _analytic(model_fn, base)
    err = _rel_error(analytic, _numeric_grad(model_fn, base, epsilon))
    return float(err.max()) if err.size else 0.0


def _pattern(out: Tensor) -> tuple:
    """Which piece of each piecewise-linear op the forward landed on."""
    key = []
    for t in topological_order(out):
        if t.node is None:
            continue
        if t.node.kind in RELU_FAMILY:
            key.append((t.node.saved["input"] > 0).tobytes())
        elif t.node.kind == "maxpool":
            key.append(t.node.saved["argmax"].tobytes())
    return tuple(key)


@dataclass
class GradCheckReport:
    max_rel_error: float  # over every element, as in grad_check
    max_rel_error_smooth: float  # over elements whose +-eps probes stay on one linear piece
    kink_elements: int
    n_elements: int


def grad_check_report(model_fn: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-3) -> GradCheckReport:
    """grad_check plus a split by whether a probe crossed a ReLU/max-pool kink.

    Central differences are only a valid oracle where the function is smooth on
    [x - eps, x + eps]; elements whose probes change the activation pattern are
    counted separately. Needs a graph on the probed outputs, so probes run with
    requires_grad.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    base = np.array(x.data)
    analytic, out = _analytic(model_fn, base)
    ref = _pattern(out) if out.requires_grad else ()
    kinked = np.zeros(base.size, dtype=bool)

    def traced(t: Tensor) -> Tensor:
        return model_fn(Tensor(t.data, requires_grad=True, dtype=t.dtype))

    def on_probe(i, probe_out):
        if probe_out.requires_grad and _pattern(probe_out) != ref:
            kinked[i] = True

    err = _rel_error(analytic, _numeric_grad(traced, base, epsilon, on_probe)).reshape(-1)
    smooth = err[~kinked]
    return GradCheckReport(
        float(err.max()) if err.size else 0.0,
        float(smooth.max()) if smooth.size else 0.0,
        int(kinked.sum()),
        int(base.size),
    )
