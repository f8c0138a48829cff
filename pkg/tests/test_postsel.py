import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from lhalf.postsel import (
    SelectionError,
    build_report,
    covariance_estimate,
    effective_rank,
    ess,
    ess_array,
    ess_loadings,
    frobenius_distance,
    select_support_gibbs,
    select_support_vi,
    sparsity_metrics,
    write_heatmap_png,
    write_matrix_csv,
)
from lhalf.state import GibbsChain, load_matrix
from lhalf.vi import VIState


def _chain(B, sigma2=None):
    B = np.asarray(B, dtype=float)
    S, p, K = B.shape
    s2 = np.ones((S, p)) if sigma2 is None else sigma2
    return GibbsChain(draws_B=B, draws_sigma2=s2, draws_lambda=np.ones((S, K)), n_iter=S, n_burn=0, thin=1, seed=0)


def _vi(mu, Lambda, nu, shape=None, rate=None):
    p, K = mu.shape
    shape = np.full(p, 5.0) if shape is None else shape
    rate = np.full(p, 2.0) if rate is None else rate
    return VIState(mu=mu, Lambda=Lambda, nu=nu, sig_shape=shape, sig_rate=rate, w=np.zeros((K, 1)), Phi=np.eye(K), c=shape / rate)


# ---------------------------------------------------------------- support selection


def test_gibbs_constant_positive_and_symmetric():
    S = 200
    draws = np.empty((S, 2, 1))
    draws[:, 0, 0] = 2.0
    draws[:, 1, 0] = np.concatenate([np.linspace(-1, 1, S // 2), -np.linspace(-1, 1, S // 2)])
    mask = select_support_gibbs(_chain(draws))
    assert mask[0, 0] and not mask[1, 0]


def test_gibbs_normal_three():
    draws = np.random.default_rng(0).normal(3.0, 1.0, (4000, 3, 2))
    assert select_support_gibbs(_chain(draws), 0.95).all()


def test_gibbs_needs_enough_draws():
    with pytest.raises(SelectionError):
        select_support_gibbs(_chain(np.ones((10, 2, 2))))


@pytest.mark.parametrize("level", [0.0, 1.0, -0.5, 1.01])
def test_level_validation(level):
    with pytest.raises(SelectionError):
        select_support_gibbs(_chain(np.ones((200, 1, 1))), level)


def test_vi_rules():
    mu = np.array([[0.0, 5.0]])
    Lam = np.eye(2)[None]
    mask = select_support_vi(_vi(mu, Lam, np.array([10.0])), 0.95)
    assert not mask[0, 0] and mask[0, 1]
    # t quantile at nu = 10 is about 2.228
    mu = np.array([[2.2, 2.3]])
    assert select_support_vi(_vi(mu, Lam, np.array([10.0])), 0.95).tolist() == [[False, True]]


def test_vi_level_to_one_selects_nothing():
    mu = np.array([[3.0, -40.0]])
    mask = select_support_vi(_vi(mu, np.eye(2)[None], np.array([4.0])), 1 - 1e-15)
    assert not mask.any()


@given(st.floats(0.5, 0.98), st.floats(0.5, 0.98), st.integers(0, 2**31 - 1))
def test_masks_monotone_in_level(l1, l2, seed):
    lo, hi = sorted((l1, l2))
    g = np.random.default_rng(seed)
    chain = _chain(g.normal(g.normal(0, 1, (3, 2)), 1.0, (300, 3, 2)))
    assert not np.any(select_support_gibbs(chain, hi) & ~select_support_gibbs(chain, lo))
    state = _vi(g.normal(0, 2, (4, 3)), np.stack([np.eye(3)] * 4), np.full(4, 6.0))
    assert not np.any(select_support_vi(state, hi) & ~select_support_vi(state, lo))


def test_effective_rank_examples():
    assert effective_rank(np.zeros((4, 8), bool)) == 0
    m = np.zeros((5, 8), bool)
    m[0, 1] = m[3, 3] = m[2, 7] = m[4, 7] = True
    assert effective_rank(m) == 3
    assert effective_rank(np.ones((3, 6), bool)) == 6


@given(arrays(bool, st.tuples(st.integers(1, 6), st.integers(1, 6))), st.randoms())
def test_effective_rank_permutation_invariant(mask, rnd):
    perm = list(range(mask.shape[1]))
    rnd.shuffle(perm)
    assert effective_rank(mask[:, perm]) == effective_rank(mask)


# ---------------------------------------------------------------- covariance


def test_single_zero_draw_gives_noise_diagonal():
    s2 = np.array([[0.5, 2.0, 1.5]])
    Sig = covariance_estimate(_chain(np.zeros((1, 3, 2)), s2))
    assert np.allclose(Sig, np.diag(s2[0]))


def test_gibbs_covariance_brute_force():
    g = np.random.default_rng(1)
    B = g.standard_normal((5, 4, 3))
    s2 = g.random((5, 4)) + 0.1
    ref = np.mean([B[s] @ B[s].T + np.diag(s2[s]) for s in range(5)], axis=0)
    got = covariance_estimate(_chain(B, s2), chunk_draws=2)
    assert np.abs(got - ref).max() < 1e-12


@given(st.integers(0, 2**31 - 1))
def test_gibbs_covariance_symmetric_psd(seed):
    g = np.random.default_rng(seed)
    Sig = covariance_estimate(_chain(g.standard_normal((6, 5, 2)), g.random((6, 5)) + 0.01))
    assert np.allclose(Sig, Sig.T, atol=1e-12)
    assert np.linalg.eigvalsh(Sig).min() > -1e-10


def test_vi_covariance_point_mass_limit():
    g = np.random.default_rng(2)
    mu = g.standard_normal((3, 2))
    Lam = np.stack([1e14 * np.eye(2)] * 3)
    shape, rate = np.full(3, 3.0), np.array([1.0, 2.0, 4.0])
    Sig = covariance_estimate(_vi(mu, Lam, np.full(3, 5.0), shape, rate))
    assert np.allclose(Sig, mu @ mu.T + np.diag(rate / (shape - 1)), atol=1e-10)


def test_vi_covariance_needs_finite_noise_mean():
    with pytest.raises(SelectionError):
        covariance_estimate(_vi(np.zeros((2, 1)), np.stack([np.eye(1)] * 2), np.full(2, 5.0), np.full(2, 1.0)))


# ---------------------------------------------------------------- metrics


def test_metrics_perfect_and_empty():
    T = np.array([[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 2.0]])
    assert sparsity_metrics(T, T) == (0.0, 0.0)
    assert sparsity_metrics(np.zeros((3, 3)), T) == (0.0, 1.0)


def test_metrics_hand_enumeration():
    # upper-triangle pairs (0,1) (0,2) (1,2) plus one more through p = 4
    T = np.zeros((4, 4))
    Hh = np.zeros((4, 4))
    T[0, 1] = T[0, 2] = T[1, 2] = 1.0   # truth: three pairs
    Hh[0, 1] = Hh[0, 2] = Hh[2, 3] = 1.0  # 2 TP, 1 FP (2,3), 1 FN (1,2)
    T, Hh = T + T.T, Hh + Hh.T
    fdr, fnr = sparsity_metrics(Hh, T)
    assert fdr == pytest.approx(1 / 3) and fnr == pytest.approx(1 / 3)


def test_metrics_threshold_and_diagonal_flag():
    T = np.eye(2) + np.array([[0, 1.0], [1.0, 0]])
    Hh = np.array([[1.0, 5e-5], [5e-5, 0.0]])
    assert sparsity_metrics(Hh, T, threshold=1e-4) == (0.0, 1.0)
    fdr, fnr = sparsity_metrics(Hh, T, threshold=1e-4, include_diagonal=True)
    assert fdr == 0.0 and fnr == pytest.approx(2 / 3)


def test_frobenius_examples():
    g = np.random.default_rng(3)
    A, B = g.standard_normal((3, 3)), g.standard_normal((3, 3))
    assert frobenius_distance(A, A) == 0.0
    assert frobenius_distance(np.eye(4), np.zeros((4, 4))) == pytest.approx(2.0)
    ref = sum((A[i, j] - B[i, j]) ** 2 for i in range(3) for j in range(3)) ** 0.5
    assert abs(frobenius_distance(A, B) - ref) < 1e-12


def test_metric_shape_mismatch():
    with pytest.raises(ValueError):
        sparsity_metrics(np.eye(2), np.eye(3))
    with pytest.raises(ValueError):
        frobenius_distance(np.eye(2), np.eye(3))


# ---------------------------------------------------------------- ESS


def test_ess_iid():
    x = np.random.default_rng(4).standard_normal(10**4)
    assert abs(ess(x) - 1e4) <= 0.15 * 1e4


def test_ess_ar1():
    g = np.random.default_rng(5)
    N, phi = 10**5, 0.9
    e = g.standard_normal(N)
    x = np.empty(N)
    x[0] = e[0] / np.sqrt(1 - phi**2)
    for t in range(1, N):
        x[t] = phi * x[t - 1] + e[t]
    target = N * (1 - phi) / (1 + phi)
    assert abs(ess(x) - target) <= 0.2 * target


def test_ess_alternating_is_capped():
    x = np.tile([1.0, -1.0], 500)
    value = ess(x)
    assert value > x.size and value == pytest.approx(10 * x.size)


def test_ess_constant_chain_flagged():
    value, degenerate = ess(np.full(200, 3.0), full_output=True)
    assert degenerate and value == 200


def test_ess_array_matches_scalar():
    X = np.random.default_rng(6).standard_normal((500, 3, 2)).cumsum(axis=0)
    arr, _ = ess_array(X)
    assert arr.shape == (3, 2)
    assert arr[1, 1] == pytest.approx(ess(X[:, 1, 1]))
    assert np.allclose(ess_loadings(_chain(X), chunk_rows=2), arr)


def test_ess_rejects_short_or_matrix_input():
    with pytest.raises(SelectionError):
        ess(np.zeros(10))
    with pytest.raises(ValueError):
        ess(np.zeros((200, 2)))


# ---------------------------------------------------------------- reports and files


def test_report_with_and_without_truth(tmp_path):
    g = np.random.default_rng(7)
    B = np.zeros((300, 4, 3))
    B[:, :, 0] = 1.0 + 0.01 * g.standard_normal((300, 4))
    chain = _chain(B)
    rep = build_report(chain)
    assert rep.K_hat == 1 and rep.fdr is None
    assert "fdr" not in rep.to_dict()
    truth = np.ones((4, 4)) + np.eye(4)
    rep = build_report(chain, Sigma_true=truth)
    assert rep.fdr == 0.0 and rep.fnr == 0.0 and rep.frob < 0.5
    path = tmp_path / "r.json"
    rep.write_json(str(path))
    payload = json.loads(path.read_text())
    assert payload["schema"] == 1 and payload["K_hat"] == 1 and payload["active_columns"] == [0]
    assert np.array(payload["support_mask"]).shape == (4, 3)


def test_report_threshold_validation():
    with pytest.raises(SelectionError):
        build_report(_chain(np.ones((200, 2, 1))), threshold=0.0)


def test_csv_and_png_outputs(tmp_path):
    M = np.array([[0.0, 1.0], [2.0, 4.0]])
    write_matrix_csv(str(tmp_path / "m.csv"), M)
    assert np.array_equal(load_matrix(str(tmp_path / "m.csv")).X, M)
    write_heatmap_png(str(tmp_path / "m.png"), M)
    img = np.asarray(Image.open(tmp_path / "m.png"))
    assert img.shape == (2, 2) and img.dtype == np.uint8
    assert img[0, 0] == 0 and img[1, 1] == 255 and img[0, 1] == round(255 / 4)
    write_heatmap_png(str(tmp_path / "c.png"), np.ones((2, 3)))
    assert np.asarray(Image.open(tmp_path / "c.png")).max() == 0
