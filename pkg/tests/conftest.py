import numpy as np
import pytest

from sparsefpca import build_basis


@pytest.fixture(scope="session")
def basis20():
    return build_basis(20)


@pytest.fixture(scope="session")
def basis6():
    return build_basis(6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(N, P, M, rng, obs_per=(1, 4), empty_vars=()):
    """Random sparse dataset on an M-point grid (standardized layout)."""
    from sparsefpca.data import SparseFunctionalDataset

    grid = np.linspace(0.0, 1.0, M)
    ys, subj, tidx, card = [], [], [], []
    for p in range(P):
        n_p = 0
        if p not in empty_vars:
            for i in range(N):
                k = rng.integers(obs_per[0], obs_per[1] + 1)
                idx = np.sort(rng.choice(M, size=min(k, M), replace=False))
                ys.append(rng.normal(size=idx.size))
                subj.append(np.full(idx.size, i))
                tidx.append(idx)
                n_p += idx.size
        card.append(n_p)
    cat = (lambda a: np.concatenate(a) if a else np.zeros(0))
    return SparseFunctionalDataset(y=cat(ys), subj=cat(subj).astype(int), time_idx=cat(tidx).astype(int),
                                   var_card=np.array(card), times=grid, n_subjects=N, n_vars=P)


def make_problem(N, P, Q, K, M, rng, **kw):
    from sparsefpca import ModelConfig, build_basis
    from sparsefpca.model import Problem

    return Problem(make_dataset(N, P, M, rng, **kw), build_basis(Q), ModelConfig(K=K, Q=Q, P=P))


def random_state(problem, rng):
    from sparsefpca.model import ParameterState

    P, Q, K, N = problem.P, problem.Q, problem.K, problem.N
    return ParameterState(
        sigma2=rng.uniform(0.3, 2.0, P), w_mu=rng.normal(size=P * Q), h_mu=rng.uniform(0.2, 3.0, P),
        lam=np.sort(rng.uniform(0.2, 3.0, K)) + 0.05 * np.arange(K), H=rng.uniform(0.2, 3.0, (P, K)),
        X=rng.normal(size=(P * Q, K)), scores_raw=rng.normal(size=(N, K)),
    )


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
