"""JSON-configured batch runner: method registry, scheduling with timeouts, patching, reports."""

from __future__ import annotations

import copy
import datetime as _dt
import functools
import inspect
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import jsonschema
import numpy as np

from . import __version__
from . import attribution as A
from . import layers as L
from .evaluation import cascading_randomization, infidelity, max_sensitivity
from .models import Model, ModelConfig, build_model, load_weights
from .runtime import CancelToken, MethodTimeout, checkpoint
from .volume_io import export_overlay_png, read_evf, write_evf
from .wrappers import make_wrapper

__all__ = [
    "ConfigError",
    "MethodSpec",
    "REGISTRY",
    "CONFIG_SCHEMA",
    "load_config",
    "validate_config",
    "build_from_config",
    "run_pipeline",
    "run_patched",
    "tile_starts",
    "setup_logging",
]

log = logging.getLogger("esegeta")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Method registry


@dataclass(frozen=True)
class MethodSpec:
    id: str
    fn: Callable
    kind: str = "input"  # input | layer | optim | batch
    needs_layer: bool = False
    fixed: dict = field(default_factory=dict)

    def accepted(self) -> set:
        sig = inspect.signature(self.fn).parameters
        return set(sig) - {"model", "target", "x", "batch", "cancel", "layer", "seed"} - set(self.fixed)

    def takes_seed(self) -> bool:
        return "seed" in inspect.signature(self.fn).parameters


def _inverted(model, target, x, layer, iters=100, step=0.1, lam=0.0, seed=0, init_scale=0.1, cancel=None):
    """Invert the representation of `x` itself at `layer`."""
    acts = L.layer_activation(model, x, layer).values
    return L.inverted_representation(model, acts, layer, x.shape, iters, step, lam, seed, init_scale, cancel)


def _deepdream(model, target, x, layer, iters=20, step=0.1, seed=0, cancel=None):
    return L.deepdream(model, x, layer, iters, step, seed, cancel)


def _registry() -> dict[str, MethodSpec]:
    specs = [
        MethodSpec("saliency", A.saliency),
        MethodSpec("vanilla_backprop", A.saliency, fixed={"signed": True}),
        MethodSpec("input_x_gradient", A.input_x_gradient),
        MethodSpec("grad_times_image", A.input_x_gradient),
        MethodSpec("integrated_gradients", A.integrated_gradients),
        MethodSpec("smoothgrad", A.smoothgrad),
        MethodSpec("guided_backprop", A.guided_backprop),
        MethodSpec("deconvolution", A.deconvolution),
        MethodSpec("gradient_shap", A.gradient_shap),
        MethodSpec("deeplift", A.deeplift_rescale),
        MethodSpec("gradcam", A.gradcam, needs_layer=True),
        MethodSpec("guided_gradcam", A.guided_gradcam, needs_layer=True),
        MethodSpec("scorecam", A.scorecam, needs_layer=True),
        MethodSpec("occlusion", A.occlusion),
        MethodSpec("feature_ablation", A.feature_ablation),
        MethodSpec("feature_permutation", A.feature_permutation, kind="batch"),
        MethodSpec("shapley_value_sampling", A.shapley_value_sampling),
        MethodSpec("rise", A.rise),
        MethodSpec("lime", A.lime),
        MethodSpec("kernel_shap", A.kernel_shap),
        MethodSpec("layer_activation", L.layer_activation, kind="layer", needs_layer=True),
        MethodSpec("layer_gradient_x_activation", L.layer_gradient_x_activation, kind="layer", needs_layer=True),
        MethodSpec("layer_conductance", L.layer_conductance, kind="layer", needs_layer=True),
        MethodSpec("internal_influence", L.internal_influence, kind="layer", needs_layer=True),
        MethodSpec("layer_gradient_shap", L.layer_gradient_shap, kind="layer", needs_layer=True),
        MethodSpec("excitation_backprop", L.excitation_backprop, kind="layer", needs_layer=True),
        MethodSpec("inverted_representation", _inverted, kind="optim", needs_layer=True),
        MethodSpec("deepdream", _deepdream, kind="optim", needs_layer=True),
    ]
    return {s.id: s for s in specs}


REGISTRY = _registry()

# array-valued parameters cannot come from JSON; these are derived from `patch_grid` instead
_NON_JSON = {"groups", "permutations", "samples", "batch_size"}


def _convert_params(spec: MethodSpec, x: np.ndarray, params: dict) -> dict:
    kw = dict(params)
    if isinstance(kw.get("baseline"), dict):
        kw["baseline"] = A.Baseline(**kw["baseline"])
    if spec.id == "feature_ablation":
        kw["groups"] = A.patch_groups(x.shape, kw.pop("patch_grid", 4))
    kw.update(spec.fixed)
    return kw


def _call(spec: MethodSpec, model, target, x, params: dict, seed: int, layer: Optional[str], cancel):
    kw = _convert_params(spec, x, params)
    if spec.takes_seed():
        kw["seed"] = seed
    if spec.needs_layer:
        kw["layer"] = layer
    return spec.fn(model, target, x, cancel=cancel, **kw)


# ---------------------------------------------------------------------------
# Config


_INT_OR_LIST = {"oneOf": [{"type": "integer", "minimum": 0}, {"type": "array", "items": {"type": "integer", "minimum": 0}}]}

CONFIG_SCHEMA: dict = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "esegeta pipeline config",
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "input", "wrapper", "methods", "runtime"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["config"],
            "properties": {
                "weights": {"type": "string", "description": "EWT1 file; omitted -> seeded zoo init"},
                "dtype": {"enum": ["float32", "float64"]},
                "config": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "dims": {"enum": [2, 3]},
                        "in_channels": {"type": "integer", "minimum": 1},
                        "classes": {"type": "integer", "minimum": 1},
                        "depth": {"type": "integer", "minimum": 1, "maximum": 3},
                        "base_channels": {"type": "integer", "minimum": 4, "maximum": 32},
                        "seed": {"type": "integer"},
                        "variant": {"enum": ["unet", "unet_mss"]},
                        "downsample": {"enum": ["conv", "maxpool"]},
                        "upsample": {"enum": ["nearest", "linear"]},
                    },
                },
            },
        },
        "input": {
            "type": "object",
            "additionalProperties": False,
            "required": ["volumes"],
            "properties": {"volumes": {"type": "array", "minItems": 1, "items": {"type": "string"}}},
        },
        "wrapper": {
            "type": "object",
            "additionalProperties": False,
            "required": ["strategy", "class"],
            "properties": {
                "strategy": {"enum": ["pixelwise", "threshold-otsu", "class"]},
                "class": {"type": "integer", "minimum": 0},
            },
        },
        "methods": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id"],
                "properties": {
                    "id": {"type": "string"},
                    "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                    "params": {"type": "object"},
                    "seed": {"type": "integer", "minimum": 0},
                    "layer": {"type": "string"},
                },
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "infidelity": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "n": {"type": "integer", "minimum": 1},
                        "sigma": {"type": "number", "exclusiveMinimum": 0},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
                "sensitivity": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "n": {"type": "integer", "minimum": 1},
                        "radius": {"type": "number", "minimum": 0},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
                "cascading": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "stages": {
                            "type": "array",
                            "items": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                        },
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
        "runtime": {
            "type": "object",
            "additionalProperties": False,
            "required": ["output_dir"],
            "properties": {
                "timeout_s": {"type": "number", "exclusiveMinimum": 0},
                "parallelism": {"type": "integer", "minimum": 1},
                "output_dir": {"type": "string"},
                "log_level": {"enum": ["DEBUG", "INFO", "WARNING", "ERROR"]},
                "png": {"type": "boolean"},
                "png_axis": {"type": "integer", "minimum": 0, "maximum": 2},
                "patch": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["size"],
                    "properties": {"size": _INT_OR_LIST, "overlap": _INT_OR_LIST},
                },
            },
        },
    },
}

RUNTIME_DEFAULTS = {"timeout_s": 300.0, "parallelism": 1, "log_level": "INFO", "png": True, "png_axis": 0}


def _where(err: jsonschema.ValidationError) -> str:
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)


def validate_config(cfg: dict, base_dir: Optional[Path] = None) -> dict:
    """Schema and registry validation; returns a normalized deep copy with defaults filled."""
    errors = sorted(jsonschema.Draft7Validator(CONFIG_SCHEMA).iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            if e.validator == "additionalProperties":
                extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
                lines.extend(f"{_where(e)}.{k}: unknown key" for k in extra)
            else:
                lines.append(f"{_where(e)}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))

    cfg = copy.deepcopy(cfg)
    names = set()
    for i, m in enumerate(cfg["methods"]):
        if m["id"] not in REGISTRY:
            raise ConfigError(f"$.methods[{i}].id: unknown method {m['id']!r}")
        spec = REGISTRY[m["id"]]
        m.setdefault("params", {})
        m.setdefault("seed", 0)
        m.setdefault("name", m["id"])
        if spec.needs_layer and "layer" not in m:
            raise ConfigError(f"$.methods[{i}]: method {m['id']!r} needs a 'layer'")
        allowed = spec.accepted() - _NON_JSON
        if spec.id == "feature_ablation":
            allowed |= {"patch_grid"}
        bad = sorted(set(m["params"]) - allowed)
        if bad:
            raise ConfigError(f"$.methods[{i}].params: unknown parameter(s) {bad} for {m['id']!r}")
        if m["name"] in names:
            raise ConfigError(f"$.methods[{i}].name: duplicate output name {m['name']!r}")
        names.add(m["name"])
    rt = cfg["runtime"]
    for k, v in RUNTIME_DEFAULTS.items():
        rt.setdefault(k, v)
    cfg.setdefault("eval", {})
    try:
        ModelConfig(**cfg["model"]["config"]).validate()
    except ValueError as e:
        raise ConfigError(f"$.model.config: {e}") from None
    if base_dir is not None:
        base = Path(base_dir)
        cfg["input"]["volumes"] = [str(base / v) for v in cfg["input"]["volumes"]]
        if "weights" in cfg["model"]:
            cfg["model"]["weights"] = str(base / cfg["model"]["weights"])
        rt["output_dir"] = str(base / rt["output_dir"])
    return cfg


def load_config(path) -> dict:
    """Read and validate a JSON config; relative paths resolve against the config's directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: JSON parse error at line {e.lineno} column {e.colno}: {e.msg}") from None
    return validate_config(raw, path.parent)


# ---------------------------------------------------------------------------
# Logging


class _IsoFormatter(logging.Formatter):
    def formatTime(self, record, datefmt=None):
        return _dt.datetime.fromtimestamp(record.created).astimezone().isoformat(timespec="milliseconds")


class _MethodFilter(logging.Filter):
    def filter(self, record):
        if not hasattr(record, "method"):
            record.method = "-"
        return True


def setup_logging(level: str = "INFO", stream=None) -> logging.Logger:
    level = os.environ.get("ESEGETA_LOG", level).upper()
    handler = logging.StreamHandler(stream)
    handler.setFormatter(_IsoFormatter("%(asctime)s %(levelname)s method=%(method)s msg=%(message)s"))
    handler.addFilter(_MethodFilter())
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False
    return log


def _mlog(method: str):
    return logging.LoggerAdapter(log, {"method": method})


# ---------------------------------------------------------------------------
# Patch execution


def tile_starts(extent: int, size: int, overlap: int) -> list[int]:
    if size < 1 or size > extent:
        raise ValueError(f"invalid tiling: patch size {size} must be in [1, {extent}]")
    if not 0 <= overlap < size:
        raise ValueError(f"invalid tiling: overlap {overlap} must be in [0, {size})")
    starts = list(range(0, extent - size + 1, size - overlap))
    if starts[-1] + size < extent:
        starts.append(extent - size)
    return starts


def run_patched(
    model: Model, target, x, method: Callable, size, overlap=0, cancel=None
) -> A.AttributionMap:
    """Tile x, run `method(model, target, patch)` per tile (target bound per tile), average overlaps."""
    t0 = time.perf_counter()
    x = A._check_input(model, x)
    spatial = x.shape[2:]
    d = len(spatial)
    size = A._per_dim(size, d, "patch size")
    overlap = A._per_dim(overlap, d, "patch overlap")
    grids = [tile_starts(s, p, o) for s, p, o in zip(spatial, size, overlap)]
    acc = np.zeros(x.shape)
    cover = np.zeros(spatial)
    name = "patched"
    for starts in np.array(np.meshgrid(*grids, indexing="ij")).reshape(d, -1).T:
        checkpoint(cancel)
        sl = tuple(slice(int(s), int(s) + p) for s, p in zip(starts, size))
        res = method(model, target, np.ascontiguousarray(x[(slice(None), slice(None)) + sl]))
        name = getattr(res, "method", name)
        acc[(slice(None), slice(None)) + sl] += np.asarray(getattr(res, "values", res), dtype=np.float64)
        cover[sl] += 1
    if cover.min() < 1:
        raise ValueError("invalid tiling: some voxels are not covered")
    values = acc / cover
    return A.AttributionMap(
        values.astype(x.dtype), name, {"patch": list(size), "overlap": list(overlap)}, getattr(target, "cls", None),
        (time.perf_counter() - t0) * 1e3,
    )


# ---------------------------------------------------------------------------
# Running


def _as_model_input(vol: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    if vol.ndim == cfg.dims:
        vol = vol[None, None]
    elif vol.ndim == cfg.dims + 1:
        vol = vol[None]
    if vol.ndim != cfg.dims + 2 or vol.shape[:2] != (1, cfg.in_channels):
        raise ValueError(f"input volume of shape {vol.shape} does not fit a {cfg.dims}D model with "
                         f"{cfg.in_channels} input channel(s)")
    return vol


def build_from_config(cfg: dict):
    """(model, wrapper, inputs) or raise; any failure here is fatal."""
    mcfg = ModelConfig(**cfg["model"]["config"]).validate()
    model = load_weights(cfg["model"]["weights"], mcfg) if "weights" in cfg["model"] else build_model(mcfg)
    if cfg["model"].get("dtype") == "float64":
        model = model.astype(np.float64)
    wrapper = make_wrapper(cfg["wrapper"]["strategy"], cfg["wrapper"]["class"])
    inputs = []
    for p in cfg["input"]["volumes"]:
        x = _as_model_input(read_evf(p).data, mcfg).astype(model.dtype)
        inputs.append((Path(p).stem, x))
    return model, wrapper, inputs


def _method_callable(spec: MethodSpec, mcfg: dict) -> Callable:
    """(model, target, x) -> AttributionMap with the configured params, seed and layer fixed."""

    def run(model, target, x, cancel=None):
        return _call(spec, model, target, x, mcfg["params"], mcfg["seed"], mcfg.get("layer"), cancel)

    return run


def _png_slice(vol: np.ndarray, axis: int) -> np.ndarray:
    v = vol[0, 0]
    if v.ndim == 2:
        return v
    return np.take(v, v.shape[axis] // 2, axis=axis)


def _compute_maps(spec, mcfg, model, wrapper, inputs, rt, cancel) -> list[np.ndarray]:
    fn = _method_callable(spec, mcfg)
    if spec.kind == "batch":
        if rt.get("patch"):
            raise ValueError(f"{spec.id} does not support patch execution")
        kw = _convert_params(spec, inputs[0][1], mcfg["params"])
        res = spec.fn(model, wrapper, [x for _, x in inputs], seed=mcfg["seed"], cancel=cancel, **kw)
        return [np.asarray(r.values) for r in res]
    out = []
    for _, x in inputs:
        checkpoint(cancel)
        if rt.get("patch"):
            if spec.kind != "input":
                raise ValueError(f"{spec.id} produces layer-shaped maps and cannot be patched")
            p = rt["patch"]
            res = run_patched(
                model, wrapper, x, functools.partial(fn, cancel=cancel), p["size"], p.get("overlap", 0), cancel
            )
        else:
            res = fn(model, wrapper, x, cancel=cancel)
        out.append(np.asarray(res.values))
    return out


def _eval_scores(spec, mcfg, model, wrapper, x, values, ev: dict, cancel) -> dict:
    scores: dict[str, Any] = {}
    if spec.kind not in ("input", "batch"):
        return scores
    method = functools.partial(_method_callable(spec, mcfg), cancel=cancel)
    if "infidelity" in ev:
        c = ev["infidelity"]
        scores["infidelity"] = infidelity(
            model, wrapper, x, values, n=c.get("n", 1000), sigma=c.get("sigma"), seed=c.get("seed", 0), cancel=cancel
        )
    if spec.kind == "batch":
        return scores
    if "sensitivity" in ev:
        c = ev["sensitivity"]
        scores["sensitivity"] = max_sensitivity(
            model, wrapper, method, x, n=c.get("n", 10), radius=c.get("radius"), seed=c.get("seed", 0), cancel=cancel
        )
    if "cascading" in ev:
        c = ev["cascading"]
        res = cascading_randomization(model, wrapper, method, x, c.get("stages"), seed=c.get("seed", 0), cancel=cancel)
        scores["cascading"] = [{"stage": s, "rho": r} for s, r in res.pairs()]
    return scores


def _run_method(mcfg, model, wrapper, inputs, cfg, read_existing=False) -> dict:
    spec = REGISTRY[mcfg["id"]]
    rt = cfg["runtime"]
    name = mcfg["name"]
    mlog = _mlog(name)
    out_dir = Path(rt["output_dir"])
    cancel = CancelToken(rt["timeout_s"])
    t0 = time.perf_counter()
    entry: dict[str, Any] = {"id": spec.id, "name": name, "status": "ok", "outputs": [], "eval": {}}
    mlog.info("start")
    staged: list[tuple[Path, Path]] = []
    try:
        if read_existing:
            maps = [read_evf(out_dir / f"{name}__{stem}.evf").data for stem, _ in inputs]
        else:
            maps = _compute_maps(spec, mcfg, model, wrapper, inputs, rt, cancel)
        for (stem, x), values in zip(inputs, maps):
            scores = _eval_scores(spec, mcfg, model, wrapper, x, values, cfg.get("eval", {}), cancel)
            if scores:
                entry["eval"][stem] = scores
        if not read_existing:
            # stage everything first so a late failure leaves no partial outputs
            for (stem, x), values in zip(inputs, maps):
                checkpoint(cancel)
                evf = out_dir / f"{name}__{stem}.evf"
                tmp = out_dir / f".{name}__{stem}.evf.tmp"
                write_evf(values, tmp)
                staged.append((tmp, evf))
                if rt["png"]:
                    png = out_dir / f"{name}__{stem}.png"
                    tmp_png = out_dir / f".{name}__{stem}.png.tmp"
                    proj = L.project_to_input(values, x.shape) if values.shape != x.shape else values
                    export_overlay_png(_png_slice(x, rt["png_axis"]), _png_slice(proj, rt["png_axis"]), tmp_png)
                    staged.append((tmp_png, png))
            checkpoint(cancel)
            for tmp, final in staged:
                os.replace(tmp, final)
            entry["outputs"] = [str(final) for _, final in staged]
            staged = []
    except MethodTimeout:
        entry["status"] = "timeout"
        mlog.warning(f"timed out after {rt['timeout_s']} s")
    except Exception as e:  # contained: one method's failure must not affect the others
        entry["status"] = "error"
        entry["error"] = f"{type(e).__name__}: {e}"
        mlog.error(entry["error"])
    finally:
        for tmp, _ in staged:
            tmp.unlink(missing_ok=True)
    entry["elapsed_ms"] = (time.perf_counter() - t0) * 1e3
    mlog.info(f"end status={entry['status']} elapsed_ms={entry['elapsed_ms']:.1f}")
    return entry


def run_pipeline(cfg: dict, eval_only: bool = False) -> dict:
    """Run every configured method (up to `parallelism` at once) and write report.json."""
    rt = cfg["runtime"]
    setup_logging(rt.get("log_level", "INFO"))
    t0 = time.perf_counter()
    out_dir = Path(rt["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    model, wrapper, inputs = build_from_config(cfg)
    log.info(f"loaded model and {len(inputs)} input volume(s)", extra={"method": "-"})
    job = functools.partial(_run_method, model=model, wrapper=wrapper, inputs=inputs, cfg=cfg, read_existing=eval_only)
    with ThreadPoolExecutor(max_workers=rt["parallelism"]) as pool:
        entries = list(pool.map(job, cfg["methods"]))
    counts = {s: sum(e["status"] == s for e in entries) for s in ("ok", "timeout", "error")}
    report = {
        "version": __version__,
        "mode": "eval" if eval_only else "run",
        "methods": entries,
        "totals": {**counts, "elapsed_ms": (time.perf_counter() - t0) * 1e3},
        "config": cfg,
    }
    name = "eval_report.json" if eval_only else "report.json"
    (out_dir / name).write_text(json.dumps(report, indent=2, default=float))
    log.info(f"done ok={counts['ok']} timeout={counts['timeout']} error={counts['error']}", extra={"method": "-"})
    return report
