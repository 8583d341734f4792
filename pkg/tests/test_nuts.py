import numpy as np
import pytest

from sparsefpca.nuts import DualAveraging, NUTSKernel, WarmupSchedule, WelfordVariance


def _gauss(scales):
    prec = 1.0 / np.asarray(scales) ** 2

    def f(x):
        return -0.5 * float(np.sum(prec * x * x)), -prec * x
    return f


def _run(kernel, x, n_warm, n_draw, rng, adapt_metric=True):
    lp, g = kernel.logp_grad(x)
    kernel.find_reasonable_step_size(x, rng, lp, g)
    warm = WarmupSchedule(kernel, n_warm, 0.8, adapt_metric=adapt_metric)
    out, infos = [], []
    for it in range(n_warm + n_draw):
        x, lp, g, info = kernel.step(x, rng, lp, g)
        if it < n_warm:
            warm.update(x, info["accept_stat"], rng, lp, g)
        else:
            out.append(x)
            infos.append(info)
    return np.array(out), infos


def test_standard_gaussian_moments():
    rng = np.random.default_rng(3)
    scales = np.array([1.0, 10.0, 0.1, 3.0])
    k = NUTSKernel(_gauss(scales), 4)
    x, infos = _run(k, np.ones(4), 500, 3000, rng)
    z = x / scales
    # NUTS on a Gaussian is close to independent; 4 se is generous
    assert np.all(np.abs(z.mean(0)) < 4 / np.sqrt(len(z)) * 2)
    assert np.all(np.abs(z.var(0) - 1) < 0.15)
    acc = np.mean([i["accept_stat"] for i in infos])
    assert 0.6 < acc < 0.95
    # the adapted metric recovers the scales
    assert np.allclose(np.sqrt(k.inv_metric), scales, rtol=0.35)


def test_fixed_metric_warmup_leaves_metric():
    rng = np.random.default_rng(4)
    k = NUTSKernel(_gauss([1.0, 2.0]), 2, inv_metric=np.array([1.0, 4.0]))
    _run(k, np.zeros(2), 200, 10, rng, adapt_metric=False)
    assert np.array_equal(k.inv_metric, [1.0, 4.0])


def test_deterministic_given_seed():
    out = []
    for _ in range(2):
        rng = np.random.default_rng(11)
        k = NUTSKernel(_gauss([1.0, 2.0, 3.0]), 3)
        x, _ = _run(k, np.ones(3), 50, 50, rng)
        out.append(x)
    assert np.array_equal(out[0], out[1])


def test_divergence_flagged_for_huge_step():
    rng = np.random.default_rng(5)
    k = NUTSKernel(_gauss([1e-3, 1.0]), 2, step_size=5.0)
    x = np.array([0.1, 0.0])
    lp, g = k.logp_grad(x)
    _, _, _, info = k.step(x, rng, lp, g)
    assert info["divergent"]


def test_invalid_region_is_rejected():
    def f(x):
        if x[0] < 0:
            return -np.inf, None
        return -0.5 * float(x @ x), -x
    rng = np.random.default_rng(6)
    k = NUTSKernel(f, 2, step_size=0.5)
    x = np.array([0.5, 0.0])
    lp, g = f(x)
    for _ in range(300):
        x, lp, g, _ = k.step(x, rng, lp, g)
        assert x[0] >= 0


def test_dual_averaging_converges_to_target():
    # accept = exp(-step) has a unique step with accept 0.8
    da = DualAveraging(1.0, target=0.8)
    eps = 1.0
    for _ in range(3000):
        eps = da.update(np.exp(-eps))
    assert da.final_step_size == pytest.approx(-np.log(0.8), rel=0.05)


def test_welford_matches_numpy(rng):
    x = rng.normal(size=(200, 3)) * [1, 2, 3]
    w = WelfordVariance(3)
    for row in x:
        w.add(row)
    n = 200
    ref = np.var(x, axis=0, ddof=1)
    assert np.allclose(w.regularized(), n / (n + 5) * ref + 1e-3 * 5 / (n + 5), rtol=1e-12)
