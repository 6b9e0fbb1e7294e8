"""Acceptance criteria 1-12. Each test prints one ``criterion N: PASS|FAIL`` line."""

import itertools
import json
import math
import time

import numpy as np
import pytest

from esegeta import attribution as A
from esegeta import evaluation as E
from esegeta import layers as L
from esegeta import tensor as T
from esegeta.models import ModelConfig, build_model
from esegeta.pipeline import load_config, run_pipeline
from esegeta.synthetic import tube_volume
from esegeta.tensor import Tensor
from esegeta.volume_io import write_evf
from esegeta.wrappers import ClassTarget, PixelwiseWrapper, otsu_threshold, wrap_pixelwise, wrap_threshold

from conftest import W, linear_model, relu_net

T0 = ClassTarget(0)
ZOO = [(2, "unet"), (2, "unet_mss"), (3, "unet"), (3, "unet_mss")]
SHAPES = {2: (1, 1, 16, 16), 3: (1, 1, 8, 8, 8)}


@pytest.fixture
def verdict(request):
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
        if tr is not None:
            tr.write_line(line)
        print(line)
        assert ok, line

    return emit


def zoo(dims, variant, dtype=np.float64):
    return build_model(ModelConfig(dims=dims, variant=variant, seed=0)).astype(dtype)


def zoo_input(dims):
    return np.random.default_rng(0).normal(size=SHAPES[dims])


def f(model, x):
    return float(model(Tensor(x, dtype=model.dtype)).data.sum())


def rel(a, b):
    return abs(a - b) / abs(b)


def test_criterion_01_gradient_oracle(verdict):
    t0 = time.perf_counter()
    errs = {}
    for dims, variant in ZOO:
        model = zoo(dims, variant)
        x = zoo_input(dims)
        bound = PixelwiseWrapper(1).bind(model(Tensor(x, dtype=np.float64)).data)
        errs[f"{dims}d-{variant}"] = T.grad_check(lambda t: bound.score(model(t)), Tensor(x, dtype=np.float64), 1e-3)
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errs.items())
    verdict(1, worst < 1e-3 and elapsed < 60, f"max rel err {worst:.2e} < 1e-3; {detail}; {elapsed:.1f} s < 60 s")


def test_criterion_02_linear_concordance(verdict):
    lin = linear_model()
    x = np.array([[[0.5, -1.0, 2.0]]])
    expect = W * x
    maps = {
        "saliency": A.saliency(lin, T0, x, signed=True).values * x,
        "ig": A.integrated_gradients(lin, T0, x, steps=32).values,
        "occlusion": A.occlusion(lin, T0, x, window=1, stride=1).values,
        "shapley": A.shapley_value_sampling(lin, T0, x, n_permutations=10).values,
        "deeplift": A.deeplift_rescale(lin, T0, x).values,
        "gradient_shap": A.gradient_shap(lin, T0, x, baseline=0.0, n=20, sigma=0.0).values,
    }
    # saliency itself is w; w * x is its input-times-gradient reading
    sal_ok = np.allclose(A.saliency(lin, T0, x, signed=True).values, np.reshape(W, x.shape), atol=1e-6, rtol=0)
    errs = {k: float(np.abs(v - expect).max()) for k, v in maps.items()}
    worst = max(errs.values())
    verdict(2, worst < 1e-6 and sal_ok, f"max abs deviation {worst:.1e} < 1e-6 over {sorted(errs)}")


def test_criterion_03_ig_completeness(verdict):
    net = relu_net(seed=0)
    x = np.random.default_rng(0).normal(size=(1, 1, 6))
    delta = f(net, x) - f(net, np.zeros_like(x))
    r = rel(A.integrated_gradients(net, T0, x, steps=128).values.sum(), delta)
    verdict(3, r < 1e-2, f"relative gap {r:.2e} < 1e-2 at m=128")


def test_criterion_04_deeplift_delta(verdict):
    net = relu_net(seed=1)
    x = np.random.default_rng(1).normal(size=(1, 1, 6))
    r_mlp = rel(A.deeplift_rescale(net, T0, x).values.sum(), f(net, x) - f(net, np.zeros_like(x)))
    unet = zoo(2, "unet")
    xu = zoo_input(2)
    bound = A.bind_target(unet, PixelwiseWrapper(1), xu)
    r_unet = rel(A.deeplift_rescale(unet, bound, xu).values.sum(), A.score(unet, bound, xu) - A.score(unet, bound, 0 * xu))
    worst = max(r_mlp, r_unet)
    verdict(4, worst < 1e-3, f"relative gap mlp {r_mlp:.1e}, 2d unet {r_unet:.1e} < 1e-3")


def _brute_shapley(value, M):
    phi = np.zeros(M)
    for i in range(M):
        others = [j for j in range(M) if j != i]
        for r in range(M):
            for S in itertools.combinations(others, r):
                w = math.factorial(r) * math.factorial(M - r - 1) / math.factorial(M)
                phi[i] += w * (value(set(S) | {i}) - value(set(S)))
    return phi


def test_criterion_05_shapley_exactness(verdict):
    net = relu_net(seed=11, n_in=4)
    x = np.random.default_rng(11).normal(size=(1, 1, 4))

    def value(S):
        z = np.zeros_like(x)
        z[..., sorted(S)] = x[..., sorted(S)]
        return f(net, z)

    exact = _brute_shapley(value, 4)
    sv = A.shapley_value_sampling(net, T0, x, permutations=itertools.permutations(range(4))).values.ravel()
    ks = A.kernel_shap(net, T0, x, patch_grid=4).values.ravel()
    delta = f(net, x) - f(net, np.zeros_like(x))
    sampled = A.shapley_value_sampling(net, T0, x, n_permutations=3, seed=4).values
    e_sv, e_ks = float(np.abs(sv - exact).max()), float(np.abs(ks - exact).max())
    e_eff = max(abs(sv.sum() - delta), abs(ks.sum() - delta), abs(sampled.sum() - delta))
    verdict(5, e_sv < 1e-6 and e_ks < 1e-6 and e_eff < 1e-12,
            f"enumerated permutations {e_sv:.1e}, kernel shap {e_ks:.1e} < 1e-6; efficiency gap {e_eff:.1e}")


def test_criterion_06_conductance_completeness(verdict):
    gaps = {}
    for dims, variant in ZOO:
        model = zoo(dims, variant)
        x = zoo_input(dims)
        bound = A.bind_target(model, PixelwiseWrapper(1), x)
        fx = A.score(model, bound, x)  # zero-bias net, F(0) = 0
        for layer in ("enc0.conv0", "dec0.conv1"):
            total = L.layer_conductance(model, bound, x, layer, steps=128).values.sum()
            gaps[f"{dims}d-{variant}:{layer}"] = rel(total, fx)
    net = relu_net(seed=2)
    xr = np.random.default_rng(2).normal(size=(1, 1, 6))
    gaps["mlp:act"] = rel(L.layer_conductance(net, T0, xr, "act", steps=128).values.sum(),
                          f(net, xr) - f(net, np.zeros_like(xr)))
    worst = max(gaps.values())
    verdict(6, worst < 2e-2, f"worst relative gap {worst:.2e} < 2e-2 over {len(gaps)} model/layer pairs")


def test_criterion_07_infidelity(verdict):
    lin = linear_model()
    x = np.array([[[0.5, -1.0, 2.0]]])
    sigma = 0.3
    zero_phi = E.infidelity(lin, T0, x, np.reshape(np.array(W, float), x.shape), n=1000, sigma=sigma)
    closed = sigma**2 * float(np.dot(W, W))
    est = E.infidelity(lin, T0, x, np.zeros(x.shape), n=5000, sigma=sigma)
    # w . I and f(x) - f(x - I) round differently; per-sample gap is a few ulps of sum |w|(|x| + |I|)
    roundoff = (64 * np.finfo(np.float64).eps * float(np.dot(np.abs(W), np.abs(x).ravel() + 5 * sigma))) ** 2
    verdict(7, zero_phi <= roundoff and rel(est, closed) < 0.1,
            f"phi=grad gives {zero_phi:.1e} <= roundoff {roundoff:.1e}; "
            f"phi=0 gives {est:.4f} vs sigma^2||w||^2 = {closed:.4f}")


def test_criterion_08_sensitivity(verdict):
    lin = linear_model()
    x = np.array([[[0.5, -1.0, 2.0]]])
    s = E.max_sensitivity(lin, T0, lambda m, t, z: A.saliency(m, t, z), x, n=10)
    verdict(8, s == 0.0, f"max sensitivity {s}")


def test_criterion_09_cascading(verdict):
    sal = lambda m, t, z: A.saliency(m, t, z)
    finals, ok = {}, True
    for dims, variant in ZOO:
        model = zoo(dims, variant, np.float32)
        x = zoo_input(dims).astype(np.float32)
        a = E.cascading_randomization(model, PixelwiseWrapper(1), sal, x, seed=1)
        b = E.cascading_randomization(model, PixelwiseWrapper(1), sal, x, seed=1)
        finals[f"{dims}d-{variant}"] = a.rhos[-1]
        ok &= a.rhos[0] == 1.0 and a.rhos == b.rhos and a.rhos[-1] < 0.5
    detail = ", ".join(f"{k} {v:.3f}" for k, v in finals.items())
    verdict(9, ok, f"rho starts at 1, deterministic, final rho < 0.5: {detail}")


def _cfg(tmp, out, methods, **rt):
    cfg = {
        "model": {"config": {"dims": 3, "seed": 0}},
        "input": {"volumes": ["vol.evf"]},
        "wrapper": {"strategy": "pixelwise", "class": 1},
        "methods": methods,
        "runtime": {"output_dir": out, **rt},
    }
    p = tmp / f"{out}.json"
    p.write_text(json.dumps(cfg))
    return load_config(p)


def _evfs(d):
    return {p.name: p.read_bytes() for p in sorted(d.glob("*.evf"))}


def test_criterion_10_determinism_and_containment(tmp_path, verdict):
    write_evf(tube_volume((8, 8, 8), seed=0), tmp_path / "vol.evf")
    methods = [
        {"id": "saliency"},
        {"id": "integrated_gradients", "params": {"steps": 8}},
        {"id": "gradcam", "layer": "enc1.conv1"},
        {"id": "smoothgrad", "params": {"n": 4}, "seed": 2},
    ]
    run_pipeline(_cfg(tmp_path, "p1", methods, parallelism=1))
    run_pipeline(_cfg(tmp_path, "p4", methods, parallelism=4))
    slow = {"id": "shapley_value_sampling", "params": {"n_permutations": 10**6}}
    rep = run_pipeline(_cfg(tmp_path, "tmo", methods + [slow], parallelism=4, timeout_s=2))
    p1, p4, tmo = _evfs(tmp_path / "p1"), _evfs(tmp_path / "p4"), _evfs(tmp_path / "tmo")
    timed_out = rep["methods"][-1]["status"] == "timeout"
    ok = len(p1) == len(methods) and p1 == p4 and p1 == tmo and timed_out
    verdict(10, ok, f"{len(p1)} EVFs identical at parallelism 1/4; timeout run identical: {p1 == tmo}; "
                    f"forced method status {rep['methods'][-1]['status']}")


def test_criterion_11_wrappers(verdict):
    s = Tensor(np.array([[[[1.0, 1.0], [1.0, 1.0]], [[2.0, 0.0], [0.0, 0.0]]]]))
    pw = (float(wrap_pixelwise(s, 1).scalar.data), float(wrap_pixelwise(s, 0).scalar.data))
    th = Tensor(np.array([[[[0.1, 0.1], [0.9, 0.9]]]]), dtype=np.float64)
    t1, t0 = float(wrap_threshold(th, 1).scalar.data), float(wrap_threshold(th, 0).scalar.data)
    mask = wrap_threshold(th, 1).mask
    thr = otsu_threshold(np.array([0.1, 0.1, 0.9, 0.9]))
    ok = pw == (2.0, 3.0) and np.isclose(t1, 1.8) and np.isclose(t0, 0.2) and (mask == [[[0, 0], [1, 1]]]).all()
    ok &= 0.1 < thr <= 0.9
    verdict(11, ok, f"pixelwise (class1, class0) = {pw}; otsu class1 {t1:.3f}, class0 {t0:.3f}, threshold {thr:.4f}")


def test_criterion_12_end_to_end(tmp_path, verdict):
    write_evf(tube_volume((16, 16, 16), seed=0), tmp_path / "vol.evf")
    methods = [
        {"id": "saliency"},
        {"id": "integrated_gradients", "params": {"steps": 32}},
        {"id": "gradcam", "layer": "dec0.conv1"},
        {"id": "occlusion", "params": {"window": 4, "stride": 4}},
        {"id": "deeplift"},
        {"id": "smoothgrad", "params": {"n": 8}, "seed": 1},
    ]
    cfg = _cfg(tmp_path, "e2e", methods, parallelism=4, timeout_s=290)
    cfg["eval"] = {"infidelity": {}, "sensitivity": {}, "cascading": {}}
    t0 = time.perf_counter()
    rep = run_pipeline(cfg)
    elapsed = time.perf_counter() - t0
    statuses = [m["status"] for m in rep["methods"]]
    metrics = all(set(m["eval"]["vol"]) >= {"infidelity", "sensitivity", "cascading"} for m in rep["methods"])
    verdict(12, statuses == ["ok"] * 6 and metrics and elapsed < 300,
            f"6 methods {statuses.count('ok')} ok, all metrics present: {metrics}; {elapsed:.0f} s < 300 s")
