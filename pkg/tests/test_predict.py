import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsefpca import ModelConfig, SamplerConfig, build_basis, run
from sparsefpca.data import standardize
from sparsefpca.errors import DataError, DomainError
from sparsefpca.postprocess import default_reference, procrustes_align
from sparsefpca.predict import (
    PREDICTION_COLUMNS,
    conditional_score_sample,
    dynamic_predict,
    score_conditional_moments,
    static_predict,
    write_predictions,
)
from sparsefpca.simulate import SimScenario, generate_multivariate


@pytest.fixture(scope="module")
def fit():
    sc = SimScenario(kind="multivariate", P=2, I=12, K_true=2, M_grid=15, obs_range=(3, 7), seed=5)
    rec, _ = generate_multivariate(sc)
    rec["time"] = 10.0 + 40.0 * rec["time"]  # original units on [10, 50]
    ds, scal = standardize(rec)
    b = build_basis(6)
    d = run(SamplerConfig(n_chains=2, n_warmup=30, n_samples=25, seed=2), ds, b, ModelConfig(K=2, Q=6, P=2), scal)
    return d, b, rec


def _joint_oracle(obs, Psi, w_mu, sigma2, lam, basis):
    # [DERIVED] condition the joint Gaussian of (xi, y) on y
    P = len(obs)
    Q = Psi.shape[0] // P
    rows, mu, noise = [], [], []
    for p, (u, _) in enumerate(obs):
        B = basis.evaluate(u)
        rows.append(B @ Psi[p * Q:(p + 1) * Q])
        mu.append(B @ w_mu[p * Q:(p + 1) * Q])
        noise.append(np.full(len(u), sigma2[p]))
    Phi = np.vstack(rows)
    y = np.concatenate([o[1] for o in obs])
    L = np.diag(lam)
    Syy = Phi @ L @ Phi.T + np.diag(np.concatenate(noise))
    G = L @ Phi.T @ np.linalg.inv(Syy)
    return G @ (y - np.concatenate(mu)), L - G @ Phi @ L


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3), st.integers(1, 3))
def test_conditional_moments_match_joint_gaussian(seed, P, K):
    rng = np.random.default_rng(seed)
    Q = 5
    basis = build_basis(Q)
    obs = []
    for _ in range(P):
        n = int(rng.integers(1, 6))
        obs.append((np.sort(rng.uniform(0, 1, n)), rng.normal(size=n)))
    S = 3
    Psi = np.stack([np.linalg.qr(rng.normal(size=(P * Q, K)))[0] for _ in range(S)])
    w_mu = rng.normal(size=(S, P * Q))
    sigma2 = rng.uniform(0.2, 2.0, (S, P))
    lam = np.sort(rng.uniform(0.2, 3.0, (S, K)), axis=1)[:, ::-1]
    mean, cov = score_conditional_moments(obs, Psi, w_mu, sigma2, lam, basis)
    for s in range(S):
        m_ref, c_ref = _joint_oracle(obs, Psi[s], w_mu[s], sigma2[s], lam[s], basis)
        assert np.abs(mean[s] - m_ref).max() < 1e-8
        assert np.abs(cov[s] - c_ref).max() < 1e-8


def test_no_observations_gives_prior():
    basis = build_basis(5)
    rng = np.random.default_rng(0)
    Psi = np.linalg.qr(rng.normal(size=(5, 2)))[0][None]
    mean, cov = score_conditional_moments([(np.zeros(0), np.zeros(0))], Psi, np.zeros((1, 5)),
                                          np.ones((1, 1)), np.array([[2.0, 0.5]]), basis)
    assert np.allclose(mean, 0)
    assert np.allclose(cov[0], np.diag([2.0, 0.5]))


def test_conditional_score_sample_moments():
    # one posterior draw repeated: the sample mean and covariance approach the oracle
    rng = np.random.default_rng(1)
    basis = build_basis(5)
    d = _single_draw_fit(rng, basis, S=20000)
    new = pd.DataFrame({"variable": ["v"] * 3, "time": [0.1, 0.5, 0.8], "value": [0.3, -1.0, 0.4]})
    xi = conditional_score_sample(new, d, basis=basis, rng=np.random.default_rng(2))
    obs = [(np.array([0.1, 0.5, 0.8]), np.array([0.3, -1.0, 0.4]))]
    m, c = _joint_oracle(obs, d.Psi[0, 0], d.w_mu[0, 0], d.sigma2[0, 0], d.lam[0, 0], basis)
    se = np.sqrt(np.diag(c) / xi.shape[0])
    assert np.all(np.abs(xi.mean(axis=0) - m) < 4 * se)
    assert np.allclose(np.cov(xi.T), c, atol=0.05 * np.abs(c).max())


def _single_draw_fit(rng, basis, S):
    from sparsefpca.data import ScalingRecord
    from sparsefpca.sampler import PosteriorDraws

    Q, K = basis.Q, 2
    Psi = np.linalg.qr(rng.normal(size=(Q, K)))[0]
    rep = lambda a: np.broadcast_to(a, (1, S) + np.shape(a)).copy()  # noqa: E731
    return PosteriorDraws(
        sigma2=rep(np.array([0.5])), w_mu=rep(rng.normal(size=Q)), h_mu=rep(np.ones(1)),
        lam=rep(np.array([1.5, 0.4])), H=rep(np.ones((1, K))), Psi=rep(Psi), scores=rep(np.zeros((1, K))),
        accept_stat=np.zeros((1, S)), divergent=np.zeros((1, S), bool), n_leapfrog=np.zeros((1, S), int),
        step_size=np.zeros((1, S)), model_config=ModelConfig(K=K, Q=Q, P=1), sampler_config=SamplerConfig(),
        scaling=ScalingRecord(["v"], [0.0], [1.0], 0.0, 1.0), times=np.linspace(0, 1, 11), subject_labels=["a"],
    )


# --- static -----------------------------------------------------------------


def test_static_matches_direct_reconstruction(fit):
    d, b, _ = fit
    sc = d.scaling
    traj = static_predict(d, subjects=[d.subject_labels[3]], times=[10.0, 30.0, 50.0])
    u = sc.to_unit_time(np.array([10.0, 30.0, 50.0]))
    B = b.evaluate(u)
    s = 11
    Psi, xi, w = d.flat("Psi")[s], d.flat("scores")[s, 3], d.flat("w_mu")[s]
    for p in range(2):
        z = B @ w[p * 6:(p + 1) * 6] + B @ Psi[p * 6:(p + 1) * 6] @ xi
        assert np.allclose(traj.values[s, 0, p], z * sc.sd[p] + sc.mean[p], atol=1e-10)


def test_static_invariant_to_alignment(fit):
    d, b, _ = fit
    al = procrustes_align(d, default_reference(d, b), b)
    a = static_predict(d).values
    c = static_predict(al).values
    assert np.abs(a - c).max() < 1e-10


def test_static_domain_and_subject_errors(fit):
    d, _, _ = fit
    with pytest.raises(DomainError):
        static_predict(d, times=[60.0])
    with pytest.raises(DataError):
        static_predict(d, subjects=["nobody"])


def test_static_dedupes_times(fit, caplog):
    d, _, _ = fit
    traj = static_predict(d, subjects=[d.subject_labels[0]], times=[20.0, 20.0, 30.0])
    assert traj.times.tolist() == [20.0, 30.0]
    assert "duplicate" in caplog.text


def test_noise_widens_intervals(fit):
    d, _, _ = fit
    a = static_predict(d, times=[15.0, 35.0])
    c = static_predict(d, times=[15.0, 35.0], with_noise=True, rng=np.random.default_rng(0))
    wa = np.subtract(*a.interval()[::-1])
    wc = np.subtract(*c.interval()[::-1])
    assert np.all(wc > wa)


def test_write_predictions_columns(fit, tmp_path):
    d, _, _ = fit
    df = write_predictions(tmp_path / "p.csv", static_predict(d, times=[20.0]))
    assert list(df.columns) == PREDICTION_COLUMNS
    assert len(df) == len(d.subject_labels) * 2
    assert np.all(df["lo95"] <= df["mean"]) and np.all(df["mean"] <= df["hi95"])


# --- dynamic ----------------------------------------------------------------


def _new_subject(rec):
    return rec[rec["subject"] == rec["subject"].iloc[0]].drop(columns="subject")


def test_dynamic_ignores_data_after_cutoff(fit):
    d, _, rec = fit
    new = _new_subject(rec)
    cut = float(np.median(new["time"]))
    a = dynamic_predict(new, cut, 5.0, d, rng=np.random.default_rng(3))
    b2 = dynamic_predict(new[new["time"] <= cut], cut, 5.0, d, rng=np.random.default_rng(3))
    assert np.array_equal(a.values, b2.values)
    assert a.times[0] == new["time"].min()
    assert a.times[-1] == pytest.approx(cut + 5.0)


def test_dynamic_no_data_uses_prior_scores(fit):
    d, _, _ = fit
    empty = pd.DataFrame({"variable": pd.Series([], dtype=object), "time": [], "value": []})
    traj = dynamic_predict(empty, 10.0, 40.0, d, rng=np.random.default_rng(0))
    assert traj.times[0] == 10.0 and traj.times[-1] == 50.0
    assert np.all(np.isfinite(traj.values))


def test_dynamic_errors(fit):
    d, _, rec = fit
    new = _new_subject(rec)
    with pytest.raises(DomainError):
        dynamic_predict(new, 45.0, 10.0, d)
    with pytest.raises(DomainError):
        dynamic_predict(new, 30.0, -1.0, d)
    with pytest.raises(DomainError):
        dynamic_predict(new, float(new["time"].min()) - 1.0, 1.0, d)
    with pytest.raises(DataError):
        dynamic_predict(rec[rec["subject"] < 2], 30.0, 1.0, d)
    bad = new.assign(variable="zzz")
    with pytest.raises(DataError):
        dynamic_predict(bad, 30.0, 1.0, d)


def test_dynamic_invariant_to_alignment(fit):
    d, b, rec = fit
    al = procrustes_align(d, default_reference(d, b), b)
    new = _new_subject(rec)
    a = dynamic_predict(new, 40.0, 5.0, d, rng=np.random.default_rng(0))
    c = dynamic_predict(new, 40.0, 5.0, al, rng=np.random.default_rng(0))
    assert np.abs(a.values - c.values).max() < 1e-10
