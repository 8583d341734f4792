import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsefpca import ModelConfig, SamplerConfig, build_basis, run
from sparsefpca.data import standardize
from sparsefpca.errors import DataError
from sparsefpca.postprocess import (
    AlignmentWarning,
    Reference,
    convergence_summary,
    default_reference,
    ess,
    evaluation_matrix,
    original_scale_fpcs,
    posterior_fpc_estimate,
    procrustes_align,
    procrustes_rotation,
    reference_from_truth,
    rhat,
    variance_explained,
)
from sparsefpca.simulate import SimScenario, generate_multivariate


@pytest.fixture(scope="module")
def fit():
    sc = SimScenario(kind="multivariate", P=2, I=15, K_true=2, M_grid=20, obs_range=(3, 8), seed=8)
    rec, truth = generate_multivariate(sc)
    ds, scal = standardize(rec, time_range=(0.0, 1.0))
    b = build_basis(6)
    d = run(SamplerConfig(n_chains=2, n_warmup=40, n_samples=30, seed=3), ds, b, ModelConfig(K=2, Q=6, P=2), scal)
    return d, b, truth


def _fitted(Psi, scores):
    return np.einsum("csqk,csnk->csnq", Psi, scores)


def _random_orth(rng, K):
    Q, R = np.linalg.qr(rng.normal(size=(K, K)))
    return Q * np.sign(np.diag(R))


# --- Procrustes -------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4))
def test_procrustes_recovers_known_rotation(seed, K):
    rng = np.random.default_rng(seed)
    Phi, _ = np.linalg.qr(rng.normal(size=(12, K)))
    R0 = _random_orth(rng, K)
    R, smin = procrustes_rotation(Phi @ R0, Phi)
    assert np.abs(R @ R.T - np.eye(K)).max() < 1e-10
    assert np.abs(Phi @ R0 @ R - Phi).max() < 1e-10
    assert smin == pytest.approx(1.0, abs=1e-10)


def test_procrustes_is_brute_force_optimal():
    # [DERIVED] K=2: minimize over rotations and reflections by grid search
    rng = np.random.default_rng(1)
    Phi = rng.normal(size=(9, 2))
    ref = rng.normal(size=(9, 2))
    R, _ = procrustes_rotation(Phi, ref)
    best = np.inf
    for a in np.linspace(0, 2 * np.pi, 20001):
        c, s = np.cos(a), np.sin(a)
        for G in (np.array([[c, -s], [s, c]]), np.array([[c, s], [s, -c]])):
            best = min(best, np.linalg.norm(ref - Phi @ G))
    assert np.linalg.norm(ref - Phi @ R) <= best + 1e-6


def test_alignment_keeps_fitted_trajectories(fit):
    d, b, _ = fit
    al = procrustes_align(d, default_reference(d, b), b)
    assert np.abs(_fitted(al.Psi, al.scores) - _fitted(d.Psi, d.scores)).max() < 1e-10
    for R in al.rotations.reshape(-1, 2, 2):
        assert np.abs(R.T @ R - np.eye(2)).max() < 1e-10


def test_alignment_invariant_to_presupplied_rotations(fit):
    # rotating the draws first does not change the aligned result
    d, b, _ = fit
    ref = default_reference(d, b)
    al1 = procrustes_align(d, ref, b)
    rng = np.random.default_rng(4)
    Rs = np.array([[_random_orth(rng, 2) for _ in range(d.n_samples)] for _ in range(d.n_chains)])
    import copy
    d2 = copy.copy(d)
    d2.Psi = np.einsum("csqk,cskj->csqj", d.Psi, Rs)
    d2.scores = np.einsum("csnk,cskj->csnj", d.scores, Rs)
    al2 = procrustes_align(d2, ref, b)
    assert np.abs(al1.Psi - al2.Psi).max() < 1e-10
    assert np.abs(al1.scores - al2.scores).max() < 1e-10


def test_alignment_to_truth_reference(fit):
    d, b, truth = fit
    ref = reference_from_truth(truth.phi, truth.grid)
    assert ref.values.shape == (2 * truth.grid.size, 2)
    al = procrustes_align(d, ref, b)
    # aligned draws are at least as close to the reference as the raw ones
    E = evaluation_matrix(b, ref.grid, 2)
    raw = np.linalg.norm(np.einsum("mq,csqk->csmk", E, d.Psi) - ref.values, axis=(2, 3))
    new = np.linalg.norm(np.einsum("mq,csqk->csmk", E, al.Psi) - ref.values, axis=(2, 3))
    assert np.all(new <= raw + 1e-10)


def test_reference_validation(fit):
    d, b, _ = fit
    with pytest.raises(DataError):
        procrustes_align(d, Reference(np.ones((3, 2)), np.linspace(0, 1, 3)), b)
    g = np.linspace(0, 1, 5)
    with pytest.raises(DataError):
        procrustes_align(d, Reference(np.full((10, 2), np.nan), g), b)
    with pytest.warns(AlignmentWarning):
        procrustes_align(d, Reference(np.ones((10, 2)), g), b)


def test_default_reference_is_orthonormal(fit):
    d, b, _ = fit
    ref = default_reference(d, b, grid=np.linspace(0, 1, 4001))
    # sum over variables of the Riemann inner products is the identity
    G = ref.values.T @ ref.values / 4001
    assert np.abs(G - np.eye(2)).max() < 5e-3


def test_posterior_fpc_estimate_orthonormal(fit):
    d, b, _ = fit
    al = procrustes_align(d, default_reference(d, b), b)
    Psi_hat, Phi_hat = posterior_fpc_estimate(al, b)
    assert np.abs(Psi_hat.T @ Psi_hat - np.eye(2)).max() < 1e-10
    assert Phi_hat.shape == (2 * d.times.size, 2)


# --- R-hat and ESS ----------------------------------------------------------


def _rhat_oracle(x):
    # [DERIVED] textbook split-R-hat written with explicit loops
    chains = []
    for c in x:
        n = len(c) // 2
        chains += [list(c[:n]), list(c[len(c) - n:])]
    n = len(chains[0])
    means = [sum(c) / n for c in chains]
    grand = sum(means) / len(means)
    B = n / (len(chains) - 1) * sum((m - grand) ** 2 for m in means)
    W = sum(sum((v - m) ** 2 for v in c) / (n - 1) for c, m in zip(chains, means)) / len(chains)
    return np.sqrt(((n - 1) / n * W + B / n) / W)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 4), st.integers(4, 41))
def test_rhat_matches_loop_oracle(seed, m, n):
    x = np.random.default_rng(seed).normal(size=(m, n)) + np.arange(m)[:, None] * 0.3
    assert rhat(x) == pytest.approx(_rhat_oracle(x), rel=1e-10)


def test_rhat_edge_cases():
    assert np.isnan(rhat(np.ones((2, 10))))
    with pytest.raises(DataError):
        rhat(np.zeros((1, 10)))
    rng = np.random.default_rng(0)
    assert rhat(rng.normal(size=(4, 4000))) < 1.01
    assert rhat(rng.normal(size=(4, 400)) + np.arange(4)[:, None]) > 1.5


def test_ess_iid_and_ar1():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5000))
    assert 0.9 * x.size < ess(x) < 1.1 * x.size
    # [DERIVED] AR(1) integrated autocorrelation time (1 + rho) / (1 - rho)
    rho = 0.8
    z = np.empty((4, 20000))
    z[:, 0] = rng.normal(size=4) / np.sqrt(1 - rho**2)
    e = rng.normal(size=z.shape)
    for t in range(1, z.shape[1]):
        z[:, t] = rho * z[:, t - 1] + e[:, t]
    target = z.size * (1 - rho) / (1 + rho)
    assert 0.85 * target < ess(z) < 1.15 * target


def test_convergence_summary_counts(fit):
    d, b, _ = fit
    al = procrustes_align(d, default_reference(d, b), b)
    s = convergence_summary(al)
    P, Q, K, N = 2, 6, 2, d.scores.shape[2]
    assert s["n_scalars"] == P + P * Q + P + K + P * K + P * Q * K + N * K
    assert s["flagged"] == (s["max_rhat"] > 1.05)
    assert set(s["groups"]) == {"sigma2", "lambda", "h_mu", "H", "w_mu", "Psi", "scores"}


# --- variance explained and original scale ----------------------------------


def test_variance_explained_against_direct_computation(fit):
    d, _, _ = fit
    tab = variance_explained(d)
    lam, s2, Psi = d.flat("lam"), d.flat("sigma2"), d.flat("Psi")
    # one draw worked by hand
    i = 7
    blk = [np.sum(Psi[i, p * 6:(p + 1) * 6] ** 2, axis=0) for p in range(2)]
    denom = lam[i].sum() + s2[i].sum()
    g1 = np.array([lam[s, 0] / (lam[s].sum() + s2[s].sum()) for s in range(lam.shape[0])])
    assert tab.loc[0, "global_mean"] == pytest.approx(g1.mean(), rel=1e-12)
    assert tab.loc[1, "global_mean"] == pytest.approx(np.mean(lam.sum(1) / (lam.sum(1) + s2.sum(1))), rel=1e-12)
    share = (lam[i] * blk[0]).sum() / denom + (lam[i] * blk[1]).sum() / denom
    assert share == pytest.approx(lam[i].sum() / denom, rel=1e-12)
    # shares add up to the global value at every truncation
    for k in (0, 1):
        assert tab.loc[k, "share_p1_mean"] + tab.loc[k, "share_p2_mean"] == pytest.approx(tab.loc[k, "global_mean"])
    assert np.all(np.diff(tab["global_mean"]) >= 0)
    assert np.all((tab["within_p1_lo"] >= 0) & (tab["within_p1_hi"] <= 1))
    with pytest.raises(DataError):
        variance_explained(d, truncations=[3])


def test_original_scale_fpcs_reproduce_curves(fit):
    d, _, _ = fit
    Psi, lam, xi = original_scale_fpcs(d)
    sd = np.repeat(d.scaling.sd, 6)
    before = np.einsum("sqk,snk->snq", d.flat("Psi"), d.flat("scores")) * sd
    after = np.einsum("sqk,snk->snq", Psi, xi)
    assert np.abs(before - after).max() < 1e-10
    assert np.all(np.diff(lam, axis=1) <= 0)
    for U in Psi[:5]:
        assert np.abs(U.T @ U - np.eye(2)).max() < 1e-10


def test_original_scale_equal_sd_is_a_rescale(fit):
    # [DERIVED] with equal sds the decomposition only rescales eigenvalues by sd^2
    import copy
    d, _, _ = fit
    d2 = copy.copy(d)
    sc = copy.copy(d.scaling)
    sc.sd = np.array([2.0, 2.0])
    d2.scaling = sc
    _, lam, _ = original_scale_fpcs(d2)
    assert np.allclose(lam, 4 * d.flat("lam"), rtol=1e-10)
