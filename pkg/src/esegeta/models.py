"""Tiny UNet-style models with named layers, taps, reinitialisation and EWT1 weight files."""

from __future__ import annotations

import copy
import hashlib
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "Layer",
    "LayerTap",
    "Model",
    "UNet",
    "Sequential",
    "WeightFileError",
    "build_model",
    "forward_with_taps",
    "reinit_layers",
    "save_weights",
    "load_weights",
    "read_ewt",
    "default_stages",
]

LEAKY_SLOPE = 0.01
INPUT_TAP = "input"


@dataclass(frozen=True)
class ModelConfig:
    dims: int = 2
    in_channels: int = 1
    classes: int = 2
    depth: int = 2
    base_channels: int = 8
    seed: int = 0
    variant: str = "unet"  # "unet" | "unet_mss"
    downsample: str = "conv"  # strided conv keeps the net piecewise-linear for DeepLift
    upsample: str = "nearest"

    def validate(self):
        if self.dims not in (2, 3):
            raise ValueError(f"unsupported dims {self.dims}; expected 2 or 3")
        if not 1 <= self.depth <= 3:
            raise ValueError(f"depth {self.depth} outside [1, 3]")
        if not 4 <= self.base_channels <= 32:
            raise ValueError(f"base_channels {self.base_channels} outside [4, 32]")
        if self.in_channels < 1 or self.classes < 1:
            raise ValueError("in_channels and classes must be >= 1")
        if self.variant not in ("unet", "unet_mss"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.downsample not in ("conv", "maxpool"):
            raise ValueError(f"unknown downsample mode {self.downsample!r}")
        if self.upsample not in ("nearest", "linear"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")
        return self


@dataclass
class Layer:
    """A named layer. `params` maps parameter name to tensor; `opts` holds static attributes."""

    name: str
    kind: str
    params: dict
    opts: dict

    def fan_in(self) -> int:
        w = self.params.get("weight")
        return int(np.prod(w.shape[1:])) if w is not None else 0


@dataclass
class LayerTap:
    name: str
    activation: Tensor

    @property
    def shape(self):
        return self.activation.shape


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def _init_params(layer: Layer, seed: int, salt: int, dtype) -> None:
    """Weights ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)) keyed on (seed, layer name); biases zero.

    Random biases swamp the shrinking signal of an untrained net and collapse the
    argmax mask to a single class, so they start at zero.
    """
    bound = np.sqrt(1.0 / max(layer.fan_in(), 1))
    rng = np.random.default_rng([seed, _name_key(layer.name), salt])
    for pname in sorted(layer.params):
        shape = layer.params[pname].shape
        if pname == "bias":
            value = np.zeros(shape)
        else:
            value = rng.uniform(-bound, bound, size=shape)
        layer.params[pname] = Tensor(value, dtype=dtype)


class Model:
    """Ordered collection of named layers plus a forward routine."""

    def __init__(self, layers: Sequence[Layer], dtype=np.float32):
        self.layers: dict[str, Layer] = {}
        for layer in layers:
            if layer.name in self.layers or layer.name == INPUT_TAP:
                raise ValueError(f"duplicate or reserved layer name {layer.name!r}")
            self.layers[layer.name] = layer
        self.dtype = np.dtype(dtype)

    # subclasses implement _run(x, emit) where emit(name, tensor) -> tensor
    def _run(self, x: Tensor, emit) -> Tensor:
        raise NotImplementedError

    @property
    def layer_names(self) -> list[str]:
        return list(self.layers)

    def param_layers(self) -> list[str]:
        return [n for n, l in self.layers.items() if l.params]

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        return self._run(self._input(x), lambda name, t: t)

    def forward_with_taps(self, x, tap_names: Sequence[str]) -> tuple[Tensor, list[LayerTap]]:
        wanted = list(tap_names)
        for name in wanted:
            if name not in self.layers and name != INPUT_TAP:
                raise KeyError(f"unknown layer {name!r}")
        x = self._input(x)
        captured = {INPUT_TAP: x}

        def emit(name, t):
            if name in wanted:
                captured[name] = t
            return t

        out = self._run(x, emit)
        return out, [LayerTap(n, captured[n]) for n in wanted]

    def _input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x), dtype=self.dtype)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [
            (f"{lname}.{pname}", layer.params[pname])
            for lname, layer in self.layers.items()
            for pname in sorted(layer.params)
        ]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def copy(self) -> "Model":
        new = copy.copy(self)
        new.layers = {
            n: Layer(l.name, l.kind, dict(l.params), dict(l.opts)) for n, l in self.layers.items()
        }
        return new

    def astype(self, dtype) -> "Model":
        new = self.copy()
        new.dtype = np.dtype(dtype)
        for layer in new.layers.values():
            layer.params = {k: Tensor(v.data, dtype=dtype) for k, v in layer.params.items()}
        return new

    def reinit_layers(self, layer_names: Sequence[str], seed: int) -> "Model":
        for name in layer_names:
            if name not in self.layers:
                raise KeyError(f"unknown layer {name!r}")
        new = self.copy()
        for name in layer_names:
            _init_params(new.layers[name], seed, 1, new.dtype)
        return new

    def randomization_order(self) -> list[str]:
        """Parameterised layers ordered from output ("top") towards input."""
        return list(reversed(self.param_layers()))


# ---------------------------------------------------------------------------
# UNet


def _conv_layer(name, cin, cout, k, dims, stride=1, padding=None, act=True) -> Layer:
    shape = (cout, cin) + (k,) * dims
    params = {"weight": Tensor(np.zeros(shape)), "bias": Tensor(np.zeros(cout))}
    pad = (k // 2) if padding is None else padding
    return Layer(name, "conv", params, {"stride": stride, "padding": pad, "act": act})


def _apply_conv(layer: Layer, x: Tensor) -> Tensor:
    p, o = layer.params, layer.opts
    y = T.conv(x, p["weight"], p["bias"], stride=o["stride"], padding=o["padding"])
    return T.leaky_relu(y, LEAKY_SLOPE) if o["act"] else y


class UNet(Model):
    """Encoder/decoder with skip concatenations; optional multi-scale auxiliary heads.

    Layer names: enc{l}.conv{0,1}, down{l}, dec{l}.conv{0,1}, out.conv, aux{l}.conv.
    Only out.conv feeds the returned output; aux heads are computed and tappable.
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        d, base = config.dims, config.base_channels
        ch = [base * 2**l for l in range(config.depth + 1)]
        layers = [
            _conv_layer("enc0.conv0", config.in_channels, ch[0], 3, d),
            _conv_layer("enc0.conv1", ch[0], ch[0], 3, d),
        ]
        for l in range(1, config.depth + 1):
            if config.downsample == "conv":
                layers.append(_conv_layer(f"down{l}", ch[l - 1], ch[l - 1], 2, d, stride=2, padding=0))
            layers += [
                _conv_layer(f"enc{l}.conv0", ch[l - 1], ch[l], 3, d),
                _conv_layer(f"enc{l}.conv1", ch[l], ch[l], 3, d),
            ]
        for l in reversed(range(config.depth)):
            layers += [
                _conv_layer(f"dec{l}.conv0", ch[l + 1] + ch[l], ch[l], 3, d),
                _conv_layer(f"dec{l}.conv1", ch[l], ch[l], 3, d),
            ]
        if config.variant == "unet_mss":
            for l in range(1, config.depth + 1):
                layers.append(_conv_layer(f"aux{l}.conv", ch[l], config.classes, 1, d, act=False))
        layers.append(_conv_layer("out.conv", ch[0], config.classes, 1, d, act=False))
        super().__init__(layers)
        for layer in self.layers.values():
            _init_params(layer, config.seed, 0, self.dtype)

    def _run(self, x: Tensor, emit) -> Tensor:
        cfg = self.config
        L = self.layers
        if x.ndim != cfg.dims + 2 or x.shape[1] != cfg.in_channels:
            raise T.ShapeError(
                f"UNet expects input (B, {cfg.in_channels}, {'S, ' * cfg.dims}...), got {x.shape}"
            )
        if any(s % 2**cfg.depth for s in x.shape[2:]):
            raise T.ShapeError(f"spatial dims {x.shape[2:]} must be divisible by {2**cfg.depth}")

        def block(prefix, h):
            h = emit(f"{prefix}.conv0", _apply_conv(L[f"{prefix}.conv0"], h))
            return emit(f"{prefix}.conv1", _apply_conv(L[f"{prefix}.conv1"], h))

        skips = [block("enc0", x)]
        h = skips[0]
        for l in range(1, cfg.depth + 1):
            if cfg.downsample == "conv":
                h = emit(f"down{l}", _apply_conv(L[f"down{l}"], h))
            else:
                h = T.maxpool(h, 2)
            h = block(f"enc{l}", h)
            skips.append(h)
        mss = cfg.variant == "unet_mss"
        if mss:
            emit(f"aux{cfg.depth}.conv", _apply_conv(L[f"aux{cfg.depth}.conv"], h))
        for l in reversed(range(cfg.depth)):
            h = T.upsample(h, 2, cfg.upsample)
            h = block(f"dec{l}", T.concat([h, skips[l]], axis=1))
            if mss and l >= 1:
                emit(f"aux{l}.conv", _apply_conv(L[f"aux{l}.conv"], h))
        return emit("out.conv", _apply_conv(L["out.conv"], h))

    def randomization_order(self) -> list[str]:
        cfg = self.config
        order = ["out.conv"] + [f"aux{l}.conv" for l in range(1, cfg.depth + 1) if f"aux{l}.conv" in self.layers]
        for l in reversed(range(cfg.depth)):
            order += [f"dec{l}.conv1", f"dec{l}.conv0"]
        for l in reversed(range(cfg.depth + 1)):
            order += [f"enc{l}.conv1", f"enc{l}.conv0"]
            if f"down{l}" in self.layers:
                order.append(f"down{l}")
        return order

    def layer_output_shape(self, name: str, input_shape: Sequence[int]) -> tuple:
        """Activation shape of `name` for an input of `input_shape`, from config arithmetic."""
        if name == INPUT_TAP:
            return tuple(input_shape)
        B, spatial = input_shape[0], list(input_shape[2:])
        layer = self.layers[name]
        level = 0
        head = name.split(".")[0]
        digits = "".join(c for c in head if c.isdigit())
        if head == "out":
            level = 0
        elif digits:
            level = int(digits)
        cout = layer.params["weight"].shape[0]
        return (B, cout) + tuple(s // 2**level for s in spatial)


class Sequential(Model):
    """Chain of layers applied in order. Used for toy and hand-built models.

    Layer kinds: conv (weight/bias; opts stride, padding), linear (weight, optional bias;
    flattens non-batch dims), relu, leaky_relu (opts slope), sigmoid, maxpool (opts k),
    upsample (opts factor, mode).
    """

    def _run(self, x: Tensor, emit) -> Tensor:
        h = x
        for name, layer in self.layers.items():
            p, o = layer.params, layer.opts
            if layer.kind == "conv":
                h = T.conv(h, p["weight"], p.get("bias"), stride=o.get("stride", 1), padding=o.get("padding", 0))
            elif layer.kind == "linear":
                if h.ndim != 2:
                    h = T.reshape(h, (h.shape[0], -1))
                h = T.linear(h, p["weight"], p.get("bias"))
            elif layer.kind == "relu":
                h = T.relu(h)
            elif layer.kind == "leaky_relu":
                h = T.leaky_relu(h, o.get("slope", LEAKY_SLOPE))
            elif layer.kind == "sigmoid":
                h = T.sigmoid(h)
            elif layer.kind == "maxpool":
                h = T.maxpool(h, o.get("k", 2))
            elif layer.kind == "upsample":
                h = T.upsample(h, o.get("factor", 2), o.get("mode", "nearest"))
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            h = emit(name, h)
        return h

    @classmethod
    def from_arrays(cls, spec: Sequence[tuple], dtype=np.float32) -> "Sequential":
        """Build from (name, kind, params-dict-of-arrays, opts) tuples."""
        layers = []
        for item in spec:
            name, kind = item[0], item[1]
            params = item[2] if len(item) > 2 else {}
            opts = item[3] if len(item) > 3 else {}
            layers.append(Layer(name, kind, {k: Tensor(v, dtype=dtype) for k, v in params.items()}, dict(opts)))
        return cls(layers, dtype=dtype)


def build_model(config: ModelConfig | dict) -> UNet:
    if isinstance(config, dict):
        config = ModelConfig(**config)
    return UNet(config)


def forward_with_taps(model: Model, x, tap_names: Sequence[str]) -> tuple[Tensor, list[LayerTap]]:
    return model.forward_with_taps(x, tap_names)


def reinit_layers(model: Model, layer_names: Sequence[str], seed: int) -> Model:
    return model.reinit_layers(layer_names, seed)


def default_stages(model: Model) -> list[list[str]]:
    """Three cascading groups: output head(s), decoder, encoder including the stem."""
    order = model.randomization_order()
    head = [n for n in order if n.startswith(("out", "aux"))]
    dec = [n for n in order if n.startswith("dec")]
    rest = [n for n in order if n not in head and n not in dec]
    if not dec:
        return [g for g in (head, rest) if g]
    return [head, dec, rest]


# ---------------------------------------------------------------------------
# EWT1 weight files


class WeightFileError(ValueError):
    pass


_EWT_MAGIC = b"EWT1"


def save_weights(model: Model, path) -> None:
    params = model.named_parameters()
    chunks = [_EWT_MAGIC, struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_ewt(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != _EWT_MAGIC:
        raise WeightFileError("bad magic")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFileError("truncated file")
        out = buf[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    if pos != len(buf):
        raise WeightFileError(f"{len(buf) - pos} trailing bytes after last tensor")
    return tensors


def load_weights(path, config: ModelConfig | dict | Model) -> Model:
    """Load an EWT1 file into a model skeleton built from `config` (or into a copy of a model)."""
    tensors = read_ewt(path)
    model = config.copy() if isinstance(config, Model) else build_model(config)
    expected = dict(model.named_parameters())
    for name, p in expected.items():
        if name not in tensors:
            raise WeightFileError(f"missing tensor {name!r} for layer {name.rsplit('.', 1)[0]!r}")
        if tensors[name].shape != p.shape:
            raise WeightFileError(f"shape mismatch for {name!r}: file {tensors[name].shape} vs model {p.shape}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise WeightFileError(f"unexpected tensors in file: {extra}")
    for name, arr in tensors.items():
        lname, pname = name.rsplit(".", 1)
        model.layers[lname].params[pname] = Tensor(arr, dtype=model.dtype)
    return model


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
