import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ckba.ba import (DegenerateObservableError, EnsembleDataset, PceConfig, bpdn,
                     dominant_direction, fit, fit_one, load_surrogate, next_direction,
                     parse_variant, predict, predict_jacobian, save_surrogate)
from ckba.kle import sample_coeffs

N = 20


def _unit(rng, n=N):
    a = rng.normal(size=n)
    return a / np.linalg.norm(a)


def _dataset(fun, q=300, n=N, seed=0, role="train"):
    Xi = sample_coeffs(seed, q, n, tag=role)
    return EnsembleDataset(Xi, np.array([[fun(x) for x in Xi.T]]), seed, role)


def _vector_fn(fun):
    return lambda xi: np.array([fun(xi)])


# ---------------------------------------------------------------------------
# bpdn
# ---------------------------------------------------------------------------

def test_bpdn_zero_when_eps_covers_target():
    rng = np.random.default_rng(0)
    D = np.column_stack([rng.normal(size=(30, 4)), np.ones(30)])
    u = rng.normal(size=30)
    res = bpdn(D, u, np.linalg.norm(u) + 1e-9)
    assert np.all(res.a == 0) and res.b == 0 and res.converged


def test_bpdn_recovers_sparse_vector():
    rng = np.random.default_rng(1)
    q, m = 200, 20
    Xi = rng.normal(size=(m, q))
    a_true = np.zeros(m)
    a_true[[3, 11]] = [1.5, -0.7]
    D = np.column_stack([Xi.T, np.ones(q)])
    res = bpdn(D, Xi.T @ a_true, 1e-8)
    np.testing.assert_allclose(res.a, a_true, atol=1e-4)
    assert abs(res.b) < 1e-4 and res.active == 2


def _grid_search_l1(u, eps):
    """Minimum-l1 feasible point of |u - a| <= eps by successive grid refinement."""
    center, half = np.zeros(3), 1.2
    for _ in range(7):
        ax = [np.linspace(c - half, c + half, 41) for c in center]
        P = np.stack(np.meshgrid(*ax, indexing="ij"), -1).reshape(-1, 3)
        ok = np.linalg.norm(P - u, axis=1) <= eps
        P = P[ok]
        center = P[np.argmin(np.abs(P).sum(axis=1))]
        half /= 5
    return center


def test_bpdn_identity_design_matches_grid_search():
    u = np.array([1.0, 0.0, 0.0])
    res = bpdn(np.eye(3), u, 0.5, has_bias=False)
    np.testing.assert_allclose(res.a, _grid_search_l1(u, 0.5), atol=1e-3)
    assert res.b == 0.0


def test_bpdn_infeasible_eps_flags_non_convergence():
    rng = np.random.default_rng(2)
    D = rng.normal(size=(40, 3))
    u = rng.normal(size=40)
    res = bpdn(D, u, 1e-6, has_bias=False)
    assert not res.converged
    np.testing.assert_allclose(res.a, np.linalg.lstsq(D, u, rcond=None)[0], atol=1e-6)


def test_bpdn_unpenalized_bias():
    rng = np.random.default_rng(3)
    Xi = rng.normal(size=(5, 100))
    u = 10.0 + 0.01 * Xi[0]
    D = np.column_stack([Xi.T, np.ones(100)])
    res = bpdn(D, u, 0.5, penalize_bias=False)
    # the free bias absorbs the mean; the small slope is dropped within eps
    assert res.b == pytest.approx(u.mean(), abs=1e-2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.9))
def test_bpdn_feasible_and_no_worse_than_least_squares(seed, frac):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(25, 6))
    u = rng.normal(size=25)
    x_ls = np.linalg.lstsq(D, u, rcond=None)[0]
    r_ls = np.linalg.norm(u - D @ x_ls)
    eps = r_ls + frac * (np.linalg.norm(u) - r_ls)
    res = bpdn(D, u, eps, has_bias=False)
    assert res.converged and res.residual <= eps + 1e-6
    assert np.abs(res.a).sum() <= np.abs(x_ls).sum() + 1e-9


# ---------------------------------------------------------------------------
# directions
# ---------------------------------------------------------------------------

def test_dominant_direction_linear():
    Xi = sample_coeffs(4, 500, N)
    u = 3 * Xi[0] - 4 * Xi[1] + 7
    fit_ = dominant_direction(Xi, u)
    expected = np.zeros(N)
    expected[:2] = [0.6, -0.8]
    np.testing.assert_allclose(fit_.direction, expected, atol=1e-3)
    ols = np.linalg.lstsq(np.column_stack([Xi.T, np.ones(500)]), u, rcond=None)[0][:N]
    np.testing.assert_allclose(fit_.direction, ols / np.linalg.norm(ols), atol=1e-3)
    assert fit_.mean == pytest.approx(u.mean()) and fit_.std == pytest.approx(u.std())


def test_dominant_direction_constant_fails():
    with pytest.raises(DegenerateObservableError):
        dominant_direction(sample_coeffs(0, 50, 4), np.full(50, 3.0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1e3))
def test_direction_unit_and_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    Xi = rng.normal(size=(6, 80))
    u = np.tanh(Xi[0] - 0.5 * Xi[2]) + 0.1 * Xi[4] ** 2
    a1 = dominant_direction(Xi, u).direction
    a2 = dominant_direction(Xi, scale * u).direction
    assert np.linalg.norm(a1) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(a1, a2, atol=1e-10)


@pytest.mark.xfail(strict=True, reason="xi_2^2 is uncorrelated with every linear function of xi, "
                   "so the affine fit of the residual points in a sampling-noise direction")
def test_next_direction_pure_quadratic_residual():
    Xi = sample_coeffs(5, 500, N)
    u = Xi[0] + Xi[1] ** 2
    fit_ = next_direction(Xi, u, lambda eta: eta[0], np.eye(N)[:1])
    assert abs(abs(fit_.direction[1]) - 1) < 1e-2


def test_next_direction_residual_with_linear_part():
    Xi = sample_coeffs(5, 500, N)
    u = Xi[0] + Xi[1] + 0.05 * Xi[1] ** 2
    fit_ = next_direction(Xi, u, lambda eta: eta[0], np.eye(N)[:1])
    assert abs(abs(fit_.direction[1]) - 1) < 1e-2
    assert abs(fit_.direction[0]) < 1e-8


def test_weights_below_tolerance_are_dropped():
    # a weight far below tau * |u| costs less residual than the l1 budget allows
    Xi = sample_coeffs(9, 400, 4)
    u = Xi[0] + 1e-3 * Xi[1]
    fit_ = dominant_direction(Xi, u, tau=0.01)
    assert fit_.direction[1] == 0.0
    assert dominant_direction(Xi, u, tau=0.0).direction[1] == pytest.approx(1e-3, rel=1e-6)


def test_next_direction_orthogonal_for_random_data():
    rng = np.random.default_rng(6)
    Xi = rng.normal(size=(8, 120))
    u = rng.normal(size=120)
    a1 = _unit(rng, 8)
    fit_ = next_direction(Xi, u, lambda eta: 0.3 * eta[0], a1[None])
    assert abs(fit_.direction @ a1) < 1e-8


def test_next_direction_signals_completion():
    Xi = sample_coeffs(7, 100, 5)
    u = 2 * Xi[0]
    assert next_direction(Xi, u, lambda eta: 2 * eta[0], np.eye(5)[:1]) is None


# ---------------------------------------------------------------------------
# surrogates
# ---------------------------------------------------------------------------

def test_linear_ridge_reproduced():
    a = np.sign(np.random.default_rng(8).normal(size=N)) * np.linspace(1, 2, N)
    a /= np.linalg.norm(a)
    f = lambda x: 2 + 3 * (a @ x)
    data = _dataset(f)
    s = fit(_vector_fn(f), data, 1, "KD")
    assert np.sqrt(np.mean((predict(s, data.Xi) - data.U) ** 2)) < 1e-6


def test_variants_coincide_at_k1():
    a = _unit(np.random.default_rng(9))
    f = lambda x: np.sin(a @ x) + 0.2 * x[3]
    data = _dataset(f, q=200)
    kd = fit(_vector_fn(f), data, 1, "KD").terms[0]
    k1 = fit(_vector_fn(f), data, 1, "Kx1D").terms[0]
    np.testing.assert_array_equal(kd.rows, k1.rows)
    np.testing.assert_allclose(kd.models[0].coefficients, k1.models[0].coefficients, atol=1e-12)


@pytest.mark.xfail(strict=True, reason="the direction comes from an affine fit; the He_3 part of the "
                   "ridge leaks into it at O(q^-1/2), far above 1e-5")
def test_cubic_ridge_on_test_ensemble():
    a = _unit(np.random.default_rng(10))
    f = lambda x: (a @ x) ** 3
    train = _dataset(f)
    test = _dataset(f, seed=1, role="test")
    s = fit(_vector_fn(f), train, 1, "KD")
    assert np.sqrt(np.mean((predict(s, test.Xi) - test.U) ** 2)) < 1e-5


def _two_ridge_problem(seed=11):
    rng = np.random.default_rng(seed)
    Q = np.linalg.qr(rng.normal(size=(N, 2)))[0].T
    a1, a2 = Q
    f = lambda x: 1.0 + 2.0 * (a1 @ x) + 0.5 * (a1 @ x) ** 2 + 0.3 * (a2 @ x) ** 3 - 0.2 * (a2 @ x)
    return Q, f


@pytest.mark.xfail(strict=True, reason="same affine-fit direction error as the single cubic ridge")
def test_kx1d_exact_recovery_of_separated_ridges():
    Q, f = _two_ridge_problem()
    train, test = _dataset(f), _dataset(f, seed=1, role="test")
    s = fit(_vector_fn(f), train, 2, "Kx1D")
    assert np.sqrt(np.mean((predict(s, test.Xi) - test.U) ** 2)) < 1e-4


def test_kx1d_two_linear_ridges_and_monotone_training_error():
    Q, _ = _two_ridge_problem()
    f = lambda x: 1.0 + 2.0 * (Q[0] @ x) - 0.5 * (Q[1] @ x)
    train, test = _dataset(f), _dataset(f, seed=1, role="test")
    s = fit(_vector_fn(f), train, 2, "Kx1D")
    assert np.sqrt(np.mean((predict(s, test.Xi) - test.U) ** 2)) < 1e-4
    rows = s.terms[0].rows
    np.testing.assert_allclose(rows @ rows.T, np.eye(len(rows)), atol=1e-8)
    tr = s.terms[0].train_rmse
    assert np.all(np.diff(tr) <= 1e-10)


def test_predict_contracts():
    Q, f = _two_ridge_problem(12)
    data = _dataset(f)
    for variant in ("KD", "Kx1D"):
        s = fit(_vector_fn(f), data, 2, variant)
        t = s.terms[0]
        zero = predict(s, np.zeros(N))[0]
        if variant == "KD":
            from ckba.pce import eval_pce
            assert zero == pytest.approx(eval_pce(t.models[0], np.zeros(2)))
        else:
            from ckba.pce import eval_pce
            assert zero == pytest.approx(sum(eval_pce(m, np.zeros(1)) for m in t.models))
        X = data.Xi[:, :7]
        np.testing.assert_allclose(predict(s, X)[0], [predict(s, X[:, k])[0] for k in range(7)])
        # null-space invariance of the ridge
        v = np.random.default_rng(0).normal(size=N)
        v -= t.rows.T @ (t.rows @ v)
        x = data.Xi[:, 0]
        assert abs(predict(s, x + v)[0] - predict(s, x)[0]) < 1e-10


def test_jacobian_matches_finite_differences():
    Q, f = _two_ridge_problem(13)
    data = _dataset(f)
    s = fit(_vector_fn(f), data, 2, "Kx1D")
    x = np.random.default_rng(1).normal(size=N)
    h = 1e-6
    fd = np.array([(predict(s, x + h * e) - predict(s, x - h * e)) / (2 * h) for e in np.eye(N)]).T
    assert np.max(np.abs(fd - predict_jacobian(s, x))) < 1e-6


def test_kd_fallback_keeps_training_error():
    # a pure 1-D ridge: the second direction adds nothing useful
    a = _unit(np.random.default_rng(14))
    f = lambda x: np.exp(0.3 * (a @ x))
    data = _dataset(f)
    term = fit_one(f, data.Xi, data.U[0], 2, "KD", PceConfig())
    if len(term.train_rmse) == 2:
        assert term.train_rmse[1] <= term.train_rmse[0] + 1e-10


def test_query_count_is_nodes_per_stage():
    a = _unit(np.random.default_rng(15))
    f = lambda x: np.sin(a @ x) + 0.3 * np.cos(x[0])
    data = _dataset(f, q=150)
    assert fit(_vector_fn(f), data, 1, "KD").terms[0].queries == 5
    assert fit(_vector_fn(f), data, 2, "Kx1D").terms[0].queries == 10
    assert fit(_vector_fn(f), data, 2, "KD").terms[0].queries == 5 + 53


def test_parse_variant():
    assert parse_variant("1D") == ("KD", 1)
    assert parse_variant("2D") == ("KD", 2)
    assert parse_variant("2x1D") == ("Kx1D", 2)
    with pytest.raises(ValueError):
        parse_variant("1x")


def test_surrogate_round_trip(tmp_path):
    Q, f = _two_ridge_problem(16)
    data = _dataset(f, q=120)
    for name in ("2D", "2x1D"):
        kind, K = parse_variant(name)
        s = fit(_vector_fn(f), data, K, kind)
        save_surrogate(s, tmp_path / name)
        t = load_surrogate(tmp_path / name)
        assert np.array_equal(predict(s, data.Xi), predict(t, data.Xi))
        assert t.queries == s.queries


def test_dataset_validation():
    with pytest.raises(ValueError):
        EnsembleDataset(np.zeros((3, 4)), np.zeros((1, 5)))
    with pytest.raises(ValueError):
        EnsembleDataset(np.zeros((3, 4)), np.full((1, 4), np.nan))
    with pytest.raises(ValueError):
        EnsembleDataset(np.zeros((3, 4)), np.zeros((1, 4)), role="validate")


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rows_orthonormal_and_kx1d_monotone(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(3, 8))
    f = lambda x: np.sin(W[0] @ x / 3) + 0.5 * np.tanh(W[1] @ x / 3) + 0.1 * (W[2] @ x / 3) ** 2
    Xi = rng.normal(size=(8, 120))
    u = np.array([f(x) for x in Xi.T])
    term = fit_one(f, Xi, u, 3, "Kx1D", PceConfig())
    np.testing.assert_allclose(term.rows @ term.rows.T, np.eye(term.K), atol=1e-8)
    assert np.all(np.diff(term.train_rmse) <= 1e-10)
