import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from memrobust import bayesopt as bo
from memrobust.errors import ExhaustedError, InputError, NumericalError


def tiny_space():
    return bo.SearchSpace([("a", "numeric", (3.0, 1.0, 2.0)), ("b", "categorical", ("x", "y"))])


# search space ----------------------------------------------------------------

def test_fabrication_grid_size():
    space = bo.SearchSpace.fabrication()
    assert space.size == 8400
    assert space.encoded_grid().shape == (8400, 5)
    assert space.names == ["perovskite", "nw_length", "nw_diameter", "pb_ed_time", "ag_thickness"]


def test_grid_order_is_lexicographic():
    grid = bo.SearchSpace.fabrication().encoded_grid()
    keys = [tuple(r) for r in grid]
    assert keys == sorted(keys)
    assert len(set(keys)) == len(keys)


def test_numeric_levels_sorted_and_scaled():
    space = tiny_space()
    assert space.dimensions[0].levels == (1.0, 2.0, 3.0)
    np.testing.assert_allclose(space.dimensions[0].codes, [0.0, 0.5, 1.0])


@given(st.integers(0, 8399))
def test_index_round_trip(i):
    space = bo.SearchSpace.fabrication()
    cfg = space.config_at(i)
    assert space.index(cfg) == i
    assert space.decode(space.encode(cfg)) == cfg
    np.testing.assert_array_equal(space.encode(cfg), space.encoded_grid()[i])


def test_off_grid_names_neighbours():
    space = bo.SearchSpace.fabrication()
    cfg = space.config_at(0)
    cfg["nw_length"] = 1.1
    with pytest.raises(InputError, match=r"\[1\.0, 1\.2\]"):
        space.index(cfg)


@pytest.mark.parametrize("bad", [{"a": 1.0}, {"a": 1.0, "b": "x", "c": 1}, {"a": 1.0, "b": "z"}])
def test_bad_configs(bad):
    with pytest.raises(InputError):
        tiny_space().index(bad)


def test_space_validation():
    with pytest.raises(InputError):
        bo.SearchSpace([("a", "numeric", (1.0, 1.0))])
    with pytest.raises(InputError):
        bo.SearchSpace([("a", "numeric", (1.0,))])
    with pytest.raises(InputError):
        bo.SearchSpace([("a", "numeric", (1.0, 2.0))], expected_size=3)
    with pytest.raises(InputError):
        bo.SearchSpace([("a", "ordinal", (1.0, 2.0))])


def test_space_dict_round_trip():
    space = bo.SearchSpace.fabrication()
    assert bo.SearchSpace.from_dict(space.to_dict()) == space


# GP --------------------------------------------------------------------------

def _data(n=7, d=2, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    return X, np.sin(4 * X[:, 0]) + X[:, 1] ** 2


def test_posterior_matches_direct_formula():
    X, y = _data()
    gp = bo.gp_fit(X, y, "fixed", lengthscale=0.4, noise=1e-3, signal=2.0)
    Xs = np.random.default_rng(1).random((5, 2))

    def k(A, B):
        d = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
        return 2.0 * np.exp(-d / (2 * 0.4 ** 2))

    Kinv = np.linalg.inv(k(X, X) + 1e-3 * np.eye(len(y)))
    mu = y.mean() + k(Xs, X) @ Kinv @ (y - y.mean())
    var = 2.0 - np.einsum("ij,jk,ik->i", k(Xs, X), Kinv, k(Xs, X))
    m, v = gp.predict(Xs)
    np.testing.assert_allclose(m, mu, rtol=1e-8)
    np.testing.assert_allclose(v, var, rtol=1e-6, atol=1e-10)


def test_lml_matches_scipy_density():
    X, y = _data()
    gp = bo.gp_fit(X, y, "fixed", lengthscale=0.3, noise=0.01, signal=1.5)
    K = bo.se_kernel(X, X, 0.3, 1.5) + 0.01 * np.eye(len(y))
    ref = stats.multivariate_normal(np.full(len(y), y.mean()), K).logpdf(y)
    assert gp.log_marginal_likelihood() == pytest.approx(ref, rel=1e-10)


def test_lml_gradient():
    X, y = _data(n=9)
    D = bo.sq_dists(X, X)
    p = np.log([0.4, 1.3, 0.02])
    _, g = bo._neg_lml(p, X, y, D)
    h = 1e-6
    num = [(bo._neg_lml(p + h * e, X, y, D)[0] - bo._neg_lml(p - h * e, X, y, D)[0]) / (2 * h)
           for e in np.eye(3)]
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-7)


def test_mle_beats_starting_point_and_respects_bounds():
    X, y = _data(n=12)
    gp = bo.gp_fit(X, y, "mle", seed=0)
    v = float(np.var(y))
    start = bo.gp_fit(X, y, "fixed", lengthscale=0.5, noise=v * 1e-4, signal=v)
    assert gp.log_marginal_likelihood() >= start.log_marginal_likelihood() - 1e-6
    assert bo.LENGTHSCALE_BOUNDS[0] <= gp.lengthscale <= bo.LENGTHSCALE_BOUNDS[1]
    assert v * bo.NOISE_BOUNDS[0] <= gp.noise <= v * bo.NOISE_BOUNDS[1]


def test_mle_is_scale_invariant():
    # tiny objective values must not be swamped by an absolute noise floor
    X, y = _data(n=12)
    a = bo.gp_fit(X, y, "mle", seed=0)
    b = bo.gp_fit(X, y * 1e-6, "mle", seed=0)
    assert b.lengthscale == pytest.approx(a.lengthscale, rel=1e-4)
    assert b.noise == pytest.approx(a.noise * 1e-12, rel=1e-3)


def test_mle_is_seeded():
    X, y = _data(n=10)
    assert bo.gp_fit(X, y, seed=4).hyper() == bo.gp_fit(X, y, seed=4).hyper()


def test_interpolates_with_small_noise():
    X, y = _data()
    gp = bo.gp_fit(X, y, "fixed", lengthscale=0.3, noise=1e-8)
    m, v = gp.predict(X)
    np.testing.assert_allclose(m, y, atol=1e-5)
    assert np.all(v < 1e-5)


def test_duplicates_need_jitter():
    X = np.zeros((3, 2))
    gp = bo.gp_fit(X, [1.0, 1.0, 1.0], "fixed", lengthscale=0.5, noise=0.0)
    assert 0 < gp.jitter <= bo.MAX_JITTER


def test_jitter_exhaustion():
    with pytest.raises(NumericalError):
        bo._cholesky(-np.eye(2))


def test_gp_input_errors():
    with pytest.raises(InputError):
        bo.gp_fit(np.zeros((0, 2)), [])
    with pytest.raises(InputError):
        bo.gp_fit(np.zeros((2, 2)), [1.0, np.nan])
    with pytest.raises(InputError):
        bo.gp_fit(np.zeros((2, 2)), [1.0, 2.0], mode="map")


# EI --------------------------------------------------------------------------

@pytest.mark.parametrize("mu, s, best, xi", [(0.0, 1.0, 0.0, 0.0), (1.2, 0.3, 1.0, 0.05),
                                             (-2.0, 0.5, 0.0, 0.0), (0.3, 2.0, 1.0, 0.1)])
def test_ei_matches_quadrature(mu, s, best, xi):
    ref, _ = integrate.quad(lambda f: max(f - best - xi, 0.0) * stats.norm.pdf(f, mu, s),
                            mu - 12 * s, mu + 12 * s, points=[best + xi], limit=200)
    assert float(bo.ei_from_moments(mu, s, best, xi)) == pytest.approx(ref, rel=1e-7, abs=1e-14)


def test_ei_zero_variance():
    np.testing.assert_array_equal(bo.ei_from_moments([2.0, 0.5], [0.0, 0.0], 1.0), [1.0, 0.0])


@given(st.floats(-5, 5), st.floats(0.01, 5), st.floats(-5, 5))
def test_ei_nonnegative_and_monotone_in_mean(mu, s, best):
    a = float(bo.ei_from_moments(mu, s, best))
    b = float(bo.ei_from_moments(mu + 0.1, s, best))
    assert 0.0 <= a <= b + 1e-15


def test_ei_argmax_first_tie():
    X = np.array([[0.0], [1.0]])
    gp = bo.gp_fit(X, [0.0, 0.0], "fixed", lengthscale=0.1, noise=1e-6)
    cand = np.array([[0.5], [0.5], [0.7]])
    k, ei = bo.ei_argmax(gp, cand, 0.0)
    assert ei[0] == ei[1] and k == 0


# campaign --------------------------------------------------------------------

def test_campaign_suggest_tell_cycle(tmp_path):
    state = bo.CampaignState(tiny_space(), seed=3)
    seen = set()
    for step in range(6):
        cfg = state.suggest() if hasattr(state, "suggest") else bo.suggest(state)
        assert state.pending == cfg
        idx = state.space.index(cfg)
        assert idx not in seen
        seen.add(idx)
        bo.tell(state, cfg, float(idx), timestamp=f"t{step}")
        assert state.pending is None
        path = tmp_path / "c.json"
        state.save(path)
        state = bo.CampaignState.load(path)
    with pytest.raises(ExhaustedError):
        bo.suggest(state)
    assert state.best()["value"] == 5.0


def test_campaign_suggest_deterministic():
    def run():
        state = bo.CampaignState(bo.SearchSpace.fabrication(), seed=7, n_init=2)
        picks = []
        for _ in range(4):
            cfg = bo.suggest(state)
            picks.append(cfg)
            bo.tell(state, cfg, sum(state.space.encode(cfg)), timestamp="t")
        return picks
    assert run() == run()


def test_replicate_warns():
    state = bo.CampaignState(tiny_space())
    cfg = {"a": 1.0, "b": "x"}
    bo.tell(state, cfg, 1.0, timestamp="t")
    bo.tell(state, cfg, 1.1, timestamp="t")
    assert len(state.warnings) == 1 and len(state.history) == 2


@pytest.mark.parametrize("value", ["abc", float("inf"), None])
def test_tell_rejects_bad_values(value):
    with pytest.raises(InputError):
        bo.tell(bo.CampaignState(tiny_space()), {"a": 1.0, "b": "x"}, value)


def test_campaign_format_checked():
    d = bo.CampaignState(tiny_space()).to_dict()
    d["format"] = 2
    with pytest.raises(InputError):
        bo.CampaignState.from_dict(d)


def test_finds_planted_optimum_quickly():
    space = bo.SearchSpace.fabrication()
    grid = space.encoded_grid()
    target = grid[4321]
    f = lambda x: math.exp(-float(np.sum((x - target) ** 2)) / 0.1)  # noqa: E731
    state = bo.CampaignState(space, seed=0)
    for n in range(1, 101):
        cfg = bo.suggest(state)
        bo.tell(state, cfg, f(space.encode(cfg)), timestamp="t")
        if space.index(cfg) == 4321:
            break
    assert space.index(state.best()["config"]) == 4321


# noise-spec search -----------------------------------------------------------

def test_optimize_alpha_with_planted_score():
    target = (0.1, 0.3)
    score = lambda a: -((a[0] - target[0]) ** 2 + (a[1] - target[1]) ** 2)  # noqa: E731
    res = bo.optimize_alpha(None, None, budget=len(bo.DEFAULT_ALPHA_GRID), score_fn=score)
    assert res.trace[0][0] == (0.0, 0.0)
    assert res.best == target
    assert len({a for a, _ in res.trace}) == len(res.trace)


def test_optimize_alpha_ties_prefer_earlier():
    res = bo.optimize_alpha(None, None, alpha_space=[(0.2, 0.0), (0.0, 0.0), (0.1, 0.1)],
                            budget=3, score_fn=lambda a: 1.0)
    assert res.best == (0.2, 0.0)


def test_optimize_alpha_validation():
    with pytest.raises(InputError):
        bo.optimize_alpha(None, None, alpha_space=[(0.7, 0.5)], score_fn=lambda a: 0.0)
    with pytest.raises(InputError):
        bo.optimize_alpha(None, None, budget=1, score_fn=lambda a: 0.0)
