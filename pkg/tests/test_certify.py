import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from memrobust import certify as ct
from memrobust import neural as nn
from memrobust.errors import DomainError, InputError, NotCertifiableError, SizeError


def tiny_net(seed, sizes=(2, 3, 2), noise=(0.2, 0.0)):
    rng = np.random.default_rng([77, seed])
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        layers.append(nn.DenseLayer(rng.normal(size=(b, a)), rng.normal(size=b),
                                    "softmax" if last else "relu",
                                    None if last else nn.MultinomialNoiseSpec(*noise)))
    return nn.DenseNetwork(layers)


# radius ----------------------------------------------------------------------

def _radius_mp(f, theta, p1, p2):
    mpmath.mp.dps = 50
    f, p1, p2 = mpmath.mpf(f), mpmath.mpf(p1), mpmath.mpf(p2)
    return (mpmath.log(1.5 - f) - theta * mpmath.log(1 - p2)) / (mpmath.log(p1) - mpmath.log(1 - p2))


@given(st.floats(0.0, 1.0), st.integers(1, 50), st.floats(0.01, 0.9), st.floats(0.0, 0.09))
def test_radius_matches_high_precision(f, theta, p1, p2):
    ref = _radius_mp(f, theta, p1, p2)
    got = ct.certified_radius(f, theta, p1, p2)
    assert abs(got - float(ref)) <= 1e-12 * max(1.0, abs(float(ref)))


def test_worked_radii():
    assert ct.certified_radius(0.5, 10, 0.3, 0.0) == 0.0
    assert ct.certified_radius(1.0, 3, 0.9, 0.0) == pytest.approx(6.5788, abs=5e-5)
    assert ct.certified_radius(0.75, 3, 0.5, 0.0) == pytest.approx(0.41504, abs=5e-6)


def test_radius_theta_free_without_half_noise():
    assert ct.certified_radius(0.9, 2, 0.7, 0.0) == ct.certified_radius(0.9, 40, 0.7, 0.0)


@pytest.mark.parametrize("args", [(1.2, 3, 0.5, 0.0), (0.7, 0, 0.5, 0.0), (0.7, 3, 0.5, 0.5),
                                  (0.7, 3, 0.0, 0.2)])
def test_radius_domain(args):
    with pytest.raises((DomainError, InputError)):
        ct.certified_radius(*args)


# bound pieces ----------------------------------------------------------------

def test_pattern_counts():
    assert ct.PerturbationPattern.of([0.0, 0.5, 1.0, 1.0, 3.0]) == ct.PerturbationPattern(1, 1, 2)
    with pytest.raises(InputError):
        ct.PerturbationPattern(2, 2, 2).validate(5)


def test_df_bound_identity_pattern():
    # all coordinates in {1}: nothing moves, bound is lambda * (1 - p1^0) = 0
    assert ct.df_bound(1.0, ct.PerturbationPattern(0, 0, 4), 4, 0.3, 0.1) == 0.0


def test_df_bound_formula():
    p1, p2, T = 0.4, 0.2, 6
    pat = ct.PerturbationPattern(1, 2, 1)
    kept = p1 ** (T - 3) * (1 - p2) ** 2
    # lambda below p1^-k: the positive part vanishes
    assert ct.df_bound(2.0, pat, T, p1, p2) == pytest.approx(2 * (1 - kept))
    assert ct.df_bound(4.0, pat, T, p1, p2) == pytest.approx(4 * (1 - kept) + (4 - 1 / p1) * kept)


def _overlap_brute(v, p1, p2):
    base = {0.0: p1, 0.5: p2, 1.0: 1 - p1 - p2}
    shifted = {}
    for lv, p in base.items():
        shifted[v * lv] = shifted.get(v * lv, 0.0) + p
    return sum(min(p, base.get(lv, 0.0)) for lv, p in shifted.items())


@pytest.mark.parametrize("v", [0.0, 0.5, 1.0, 2.0, -1.0, 0.25, 5.0])
@pytest.mark.parametrize("p1, p2", [(0.2, 0.3), (0.5, 0.0), (0.1, 0.6)])
def test_coordinate_overlap_brute_force(v, p1, p2):
    assert float(ct.coordinate_overlap(np.array(v), p1, p2)) == pytest.approx(_overlap_brute(v, p1, p2))


# smoothing -------------------------------------------------------------------

def test_threshold_example():
    # a step classifier on one coordinate that fires unless the mask zeroes it
    fn = lambda th: float(th[0] > 0)  # noqa: E731
    assert ct.smoothed_expectation(fn, [1.0], 0.2, 0.3) == pytest.approx(0.8)


def test_mask_atoms_sum_to_one():
    atoms, probs = ct.mask_atoms(4, 0.2, 0.3)
    assert atoms.shape == (81, 4) and probs.sum() == pytest.approx(1.0)
    atoms, probs = ct.mask_atoms(4, 0.2, 0.0)
    assert atoms.shape == (16, 4)


def test_exact_smoothed_matches_naive_enumeration():
    net = tiny_net(1, noise=(0.2, 0.3))
    x = np.array([0.3, -0.8])
    total = np.zeros(2)
    for eta in itertools.product([(0.0, 0.2), (0.5, 0.3), (1.0, 0.5)], repeat=6):
        mask = np.array([e[0] for e in eta]).reshape(3, 2)
        total += np.prod([e[1] for e in eta]) * nn.forward(net, x, "noisy", masks=[mask, None])
    np.testing.assert_allclose(ct.exact_smoothed(net, x, 0.2, 0.3), total, rtol=1e-12)


@pytest.mark.parametrize("use_numba", [False, True])
def test_exact_smoothed_backends(use_numba):
    net = tiny_net(2, noise=(0.2, 0.3))
    ref = ct.exact_smoothed(net, [0.1, 0.2], 0.2, 0.3, use_numba=False)
    np.testing.assert_allclose(ct.exact_smoothed(net, [0.1, 0.2], 0.2, 0.3, use_numba=use_numba),
                               ref, rtol=1e-13)


def test_size_cap():
    net = tiny_net(0, sizes=(2, 8, 2))
    with pytest.raises(SizeError):
        ct.exact_smoothed(net, [0.0, 0.0], 0.2, 0.0)


def test_coordinates_fallback_without_sites():
    net = tiny_net(0).with_noise(None)
    np.testing.assert_array_equal(ct.certified_coordinates(net), np.arange(6))


# certificates ----------------------------------------------------------------

def test_certify_exact_and_monte_carlo_agree():
    net = tiny_net(3)
    exact = ct.certify_network(net, [0.5, -0.25], 0.2, 0.0)
    assert exact.method == "exact"
    wide = tiny_net(3, sizes=(2, 8, 2))
    mc = ct.certify_network(wide, [0.5, -0.25], 0.2, 0.0, n_samples=4000, seed=1)
    assert mc.method == "monte-carlo" and mc.theta_count == 16
    assert 0.0 <= mc.f_pi0 <= 1.0


def test_clopper_pearson():
    assert ct.clopper_pearson_lower(0, 10) == 0.0
    lo = ct.clopper_pearson_lower(90, 100, 0.95)
    assert 0.8 < lo < 0.9
    assert ct.clopper_pearson_lower(100, 100, 0.999) == pytest.approx(0.001 ** (1 / 100))


def _certifiable_net(seed):
    for k in range(50):
        net = tiny_net(1000 * seed + k)
        cert = ct.certify_network(net, [0.5, -0.25], 0.8, 0.0)
        if cert.budget >= 1:
            return net
    pytest.skip("no certifiable net in the search")


def test_verify_certificate_sound():
    net = _certifiable_net(0)
    report = ct.verify_certificate(net, [0.5, -0.25], 0.8, 0.0)
    assert report.ok and report.n_violations == 0
    assert report.n_overlap_failures == 0
    assert report.tested_patterns > 0 and report.min_margin > 0


def test_verify_rejects_uncertified():
    net = tiny_net(0)
    net.layers[-1].weights[:] = 0.0
    net.layers[-1].bias[:] = 0.0
    with pytest.raises(NotCertifiableError):
        ct.verify_certificate(net, [0.5, -0.25], 0.8, 0.0)


def test_fixture_certificate():
    import json
    from importlib import resources

    data = json.loads(resources.files("memrobust").joinpath("data/certify_fixture.json").read_text())
    net = nn.DenseNetwork.from_dict(data["model"])
    cert = ct.certify_network(net, data["input"], data["p1"], data["p2"])
    assert cert.certified and cert.budget >= 1


def _df_enumerated(lam, delta, p1, p2):
    """sum over support of [lam * pi0 - pi_delta]_+ by listing both laws."""
    base = {0.0: p1, 0.5: p2, 1.0: 1 - p1 - p2}
    pi0, pid = {}, {}
    for eta in itertools.product(base, repeat=len(delta)):
        p = np.prod([base[e] for e in eta])
        pi0[eta] = pi0.get(eta, 0.0) + p
        key = tuple(d * e for d, e in zip(delta, eta))
        pid[key] = pid.get(key, 0.0) + p
    return sum(max(lam * pi0.get(a, 0.0) - pid.get(a, 0.0), 0.0) for a in set(pi0) | set(pid))


@pytest.mark.parametrize("theta", [2, 3, 5])
def test_df_bound_single_zero(theta):
    pat = ct.PerturbationPattern(1, 0, theta - 1)
    assert ct.df_bound(1.0, pat, theta, 0.5, 0.0) == pytest.approx(0.5)


def test_df_bound_single_zero_enumerated():
    assert _df_enumerated(1.0, (0.0, 1.0), 0.5, 0.0) == pytest.approx(0.5)
    assert ct.df_bound(1.0, ct.PerturbationPattern(1, 0, 1), 2, 0.5, 0.0) == pytest.approx(0.5)


def test_closed_form_understates_half_coordinates():
    # with p2 < p3 the closed form treats a 0.5 coordinate as almost free;
    # the enumerated divergence is larger, which the overlap bound captures
    p1, p2 = 0.5, 0.0
    closed = ct.df_bound(1.0, ct.PerturbationPattern(0, 1, 1), 2, p1, p2)
    exact = _df_enumerated(1.0, (0.5, 1.0), p1, p2)
    assert closed == pytest.approx(0.0)
    assert exact == pytest.approx(0.5)
    assert float(ct.tv_upper_bound([0.5, 1.0], p1, p2)[0]) == pytest.approx(exact)


@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.floats(0.05, 0.6),
       st.floats(0.0, 0.3), st.floats(1.0, 5.0), st.floats(0.0, 3.0))
def test_df_bound_monotone_in_lambda(k, l, m, p1, p2, lam, step):
    theta = k + l + m + 1
    pat = ct.PerturbationPattern(k, l, m)
    assert ct.df_bound(lam + step, pat, theta, p1, p2) >= ct.df_bound(lam, pat, theta, p1, p2) - 1e-12
