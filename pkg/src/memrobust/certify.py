"""Certified robustness of multinomial-noise smoothed classifiers.

The smoothed classifier averages a network's output over weight masks
``eta`` with i.i.d. entries in {0, 0.5, 1} (probabilities p1, p2,
1 - p1 - p2).  If its top-class score ``f`` exceeds 0.5, the radius

    r = [ln(1.5 - f) - T ln(1 - p2)] / [ln p1 - ln(1 - p2)]

bounds how many of the ``T`` masked coordinates may be multiplied by
arbitrary values (the rest by 0.5 or 1) before the score can drop to 0.5.
The guarantee rests on a closed-form divergence bound, :func:`df_bound`,
and is checked here by brute force on tiny networks.

Certified coordinates are the weights of the layers carrying noise sites,
flattened layer by layer in row-major order.  Biases are never perturbed.
"""

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import kernels
from .errors import DomainError, InputError, NotCertifiableError, SizeError
from .neural import MultinomialNoiseSpec, as_rng

EXACT_CAP = 14
VERIFY_CAP = 10
DEFAULT_VALUE_GRID = (-1.0, 0.1, 0.25, 2.0, 5.0)
SWEEP_CAP = 512


def _check_probs(p1, p2):
    MultinomialNoiseSpec(p1, p2)
    if not 0.0 < p1 < 1.0:
        raise DomainError(f"p1 must lie strictly between 0 and 1, got {p1}")
    if not 0.0 <= p2 < 1.0:
        raise DomainError(f"p2 must lie in [0, 1), got {p2}")


def certified_radius(f_pi0, theta_count, p1, p2):
    """Right-hand side of the radius bound (not floored)."""
    _check_probs(p1, p2)
    if not 0.0 <= f_pi0 <= 1.0:
        raise DomainError(f"f_pi0 must lie in [0, 1], got {f_pi0}")
    if theta_count < 1:
        raise DomainError("theta_count must be positive")
    denom = math.log(p1) - math.log1p(-p2)
    if denom == 0.0:
        raise DomainError("p1 = 1 - p2 makes the radius undefined")
    return (math.log(1.5 - f_pi0) - theta_count * math.log1p(-p2)) / denom


@dataclass(frozen=True)
class PerturbationPattern:
    """Counts of coordinates of a perturbation equal to 0 (k), 0.5 (l) and 1 (m)."""
    k: int
    l: int
    m: int

    def validate(self, theta_count):
        if min(self.k, self.l, self.m) < 0:
            raise InputError("pattern counts must be non-negative")
        if self.k + self.l + self.m > theta_count:
            raise InputError(f"k + l + m = {self.k + self.l + self.m} exceeds theta_count {theta_count}")

    @classmethod
    def of(cls, delta):
        delta = np.asarray(delta, dtype=np.float64)
        return cls(int(np.sum(delta == 0.0)), int(np.sum(delta == 0.5)), int(np.sum(delta == 1.0)))


def df_bound(lam, pattern, theta_count, p1, p2):
    """Closed-form divergence between the scaled base and perturbed mask laws."""
    pattern.validate(theta_count)
    if lam < 0:
        raise InputError("lambda must be non-negative")
    _check_probs(p1, p2)
    kept = p1 ** (theta_count - pattern.m - pattern.l) * (1.0 - p2) ** pattern.l
    return lam * (1.0 - kept) + max(lam - p1 ** (-pattern.k), 0.0) * kept


def coordinate_overlap(values, p1, p2):
    """Overlap ``sum min(P, Q)`` between one mask coordinate's law and its
    law after multiplication by each entry of ``values``.

    Unlike the closed form above, this is exact for every value, including
    0.5, where the shifted atoms {0, 0.25, 0.5} only share 0 and 0.5.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size > 64:
        # perturbation blocks repeat a handful of values
        uniq, inverse = np.unique(values, return_inverse=True)
        return coordinate_overlap(uniq, p1, p2)[inverse].reshape(values.shape)
    base_lv = np.array([0.0, 0.5, 1.0])
    base_p = np.array([p1, p2, max(1.0 - p1 - p2, 0.0)])
    shifted_lv = values[..., None] * base_lv
    total = np.zeros(values.shape)
    # group the shifted atoms by level, then take min against the base mass
    for j in range(3):
        first = np.ones(values.shape, dtype=bool)
        for i in range(j):
            first &= shifted_lv[..., i] != shifted_lv[..., j]
        mass = np.zeros(values.shape)
        for i in range(3):
            mass += np.where(shifted_lv[..., i] == shifted_lv[..., j], base_p[i], 0.0)
        base_mass = np.zeros(values.shape)
        for i in range(3):
            base_mass += np.where(base_lv[i] == shifted_lv[..., j], base_p[i], 0.0)
        total += np.where(first, np.minimum(mass, base_mass), 0.0)
    return total


def tv_upper_bound(deltas, p1, p2):
    """Upper bound on the total variation between the base mask law and the
    law of ``delta * eta``, from per-coordinate overlaps (rows of ``deltas``)."""
    return 1.0 - np.prod(coordinate_overlap(np.atleast_2d(deltas), p1, p2), axis=-1)


# ---------------------------------------------------------------------------
# exact smoothing
# ---------------------------------------------------------------------------

def _mask_levels(p1, p2):
    levels = np.array([0.0, 0.5, 1.0])
    probs = np.array([p1, p2, max(1.0 - p1 - p2, 0.0)])
    keep = probs > 0
    return levels[keep], probs[keep]


def mask_atoms(theta_count, p1, p2):
    """Every mask in {0, 0.5, 1}^T with positive probability, and its mass.

    Atoms are listed in lexicographic order of levels.
    """
    levels, probs = _mask_levels(p1, p2)
    idx = np.array(list(itertools.product(range(levels.size), repeat=theta_count)),
                   dtype=np.int64).reshape(-1, theta_count)
    return levels[idx], np.prod(probs[idx], axis=1)


def smoothed_expectation(fn, theta0, p1, p2):
    """``sum_eta P(eta) fn(theta0 * eta)`` for an arbitrary callable."""
    theta0 = np.asarray(theta0, dtype=np.float64).reshape(-1)
    if theta0.size > EXACT_CAP:
        raise SizeError(f"{theta0.size} coordinates exceed the enumeration cap of {EXACT_CAP}")
    MultinomialNoiseSpec(p1, p2)
    atoms, probs = mask_atoms(theta0.size, p1, p2)
    total = 0.0
    for eta, p in zip(atoms, probs):
        total = total + p * np.asarray(fn(theta0 * eta), dtype=np.float64)
    return total


def certified_coordinates(net):
    """Flat parameter indices of the coordinates being smoothed."""
    idx = net.weight_indices(noisy_only=True)
    if idx.size == 0:
        # no explicit sites: every layer that could carry one
        _, _, w_off, _ = net.layout()
        idx = np.concatenate([np.arange(off, off + l.weights.size)
                              for off, l in zip(w_off[:-1], net.layers[:-1])]) \
            if len(net.layers) > 1 else np.zeros(0, dtype=np.int64)
    return idx


def _prepare(net, x, p1, p2, cap):
    MultinomialNoiseSpec(p1, p2)
    coords = certified_coordinates(net)
    if coords.size == 0:
        raise InputError("network has no coordinates to smooth")
    if coords.size > cap:
        raise SizeError(f"theta_count {coords.size} exceeds the exact cap of {cap}; "
                        "use smoothed_predict for a Monte-Carlo estimate")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != net.layers[0].n_in:
        raise InputError(f"input width {x.size} does not match network input {net.layers[0].n_in}")
    atoms, probs = mask_atoms(coords.size, p1, p2)
    return coords, x, atoms, probs


def exact_smoothed(net, x, p1, p2, deltas=None, use_numba=None):
    """Exact smoothed class probabilities by enumerating every mask.

    With ``deltas`` (rows of multiplicative perturbations of the certified
    coordinates) returns one probability vector per row instead.
    """
    coords, x, atoms, probs = _prepare(net, x, p1, p2, EXACT_CAP)
    single = deltas is None
    deltas = np.ones((1, coords.size)) if single else np.atleast_2d(deltas)
    if deltas.shape[1] != coords.size:
        raise InputError(f"deltas need {coords.size} columns")
    out = _enumerate(net, coords, deltas, atoms, probs, x, p1, p2, use_numba)
    return out[0] if single else out


def _enumerate(net, coords, deltas, atoms, probs, x, p1, p2, use_numba):
    levels, level_probs = _mask_levels(p1, p2)
    return kernels.enumerate_smoothed(net.flat_params(), coords, deltas, atoms, probs,
                                      net.layout(), x, use_numba=use_numba,
                                      levels=levels, level_probs=level_probs)


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------

@dataclass
class RobustnessCertificate:
    f_pi0: float
    theta_count: int
    p1: float
    p2: float
    radius: float
    certified: bool
    top_class: int = 0
    method: str = "exact"

    @property
    def budget(self):
        return int(math.floor(self.radius)) if self.certified else -1

    def to_dict(self):
        return asdict(self)


def _certificate(f, c, theta_count, p1, p2, method):
    r = certified_radius(f, theta_count, p1, p2)
    return RobustnessCertificate(float(f), int(theta_count), float(p1), float(p2), float(r),
                                 bool(r >= 0 and f > 0.5), int(c), method)


def clopper_pearson_lower(successes, n, confidence=0.999):
    """One-sided lower confidence bound on a binomial proportion."""
    if successes <= 0:
        return 0.0
    return float(stats.beta.ppf(1.0 - confidence, successes, n - successes + 1))


def certify_network(net, x, p1, p2, n_samples=10000, seed=0, confidence=0.999):
    """Certificate for input ``x``.

    Exact enumeration when the coordinate count is within the cap.  Beyond
    it the top-class score is replaced by a Clopper-Pearson lower bound on
    the probability that a noisy hard prediction equals the top class.
    """
    coords = certified_coordinates(net)
    if coords.size <= EXACT_CAP:
        probs = exact_smoothed(net, x, p1, p2)
        c = int(np.argmax(probs))
        return _certificate(probs[c], c, coords.size, p1, p2, "exact")
    rng = as_rng(seed)
    params = net.flat_params()
    batch = np.repeat(params[None, :], n_samples, axis=0)
    spec = MultinomialNoiseSpec(p1, p2)
    from .neural import sample_noise_mask

    batch[:, coords] *= sample_noise_mask(spec, (n_samples, coords.size), rng)
    out = kernels.forward_batch(batch, net.layout(), np.asarray(x, dtype=np.float64).reshape(-1))
    votes = np.bincount(np.argmax(out, axis=1), minlength=out.shape[1])
    c = int(np.argmax(votes))
    f = clopper_pearson_lower(int(votes[c]), n_samples, confidence)
    return _certificate(f, c, coords.size, p1, p2, "monte-carlo")


@dataclass
class VerificationReport:
    certificate: RobustnessCertificate
    budget: int
    tested_patterns: int = 0
    min_margin: float = math.inf
    violations: list = field(default_factory=list)
    n_violations: int = 0
    chain_failures: list = field(default_factory=list)
    n_chain_failures: int = 0
    n_chain_failures_with_half: int = 0
    n_overlap_failures: int = 0
    uncertified_probes: int = 0
    uncertified_flips: int = 0
    sampled: bool = False

    @property
    def ok(self):
        return not self.violations

    def to_dict(self):
        d = self.certificate.to_dict()
        d.update({
            "budget": self.budget,
            "tested_patterns": self.tested_patterns,
            "min_margin": self.min_margin,
            "violations": self.violations,
            "n_violations": self.n_violations,
            "chain_failures": self.chain_failures,
            "n_chain_failures": self.n_chain_failures,
            "n_chain_failures_with_half": self.n_chain_failures_with_half,
            "n_overlap_failures": self.n_overlap_failures,
            "uncertified_probes": self.uncertified_probes,
            "uncertified_flips": self.uncertified_flips,
            "sampled": self.sampled,
        })
        return d


def _df_bound_rows(block, theta_count, p1, p2):
    """:func:`df_bound` at lambda = 1 for every row of ``block``."""
    l = np.sum(block == 0.5, axis=1)
    m = np.sum(block == 1.0, axis=1)
    kept = p1 ** (theta_count - m - l) * (1.0 - p2) ** l
    return 1.0 - kept


def _perturbations(theta_count, budget, value_grid, rng, max_rows=1 << 16):
    """Yield blocks of perturbation rows inside the robustness set."""
    for size in range(budget + 1):
        rest = theta_count - size
        n_rest = 2 ** rest
        if n_rest > SWEEP_CAP:
            pick = np.sort(rng.choice(n_rest, SWEEP_CAP, replace=False))
        else:
            pick = np.arange(n_rest)
        # bit j of the sweep index sets coordinate j of the rest to 0.5
        bits = (pick[:, None] >> np.arange(rest)[None, :]) & 1
        sweep = np.where(bits == 1, 0.5, 1.0)
        combos = np.array(list(itertools.product(value_grid, repeat=size)), dtype=np.float64)
        combos = combos.reshape(len(value_grid) ** size, size)
        per_chunk = max(1, max_rows // sweep.shape[0])
        for subset in itertools.combinations(range(theta_count), size):
            others = [j for j in range(theta_count) if j not in subset]
            for start in range(0, combos.shape[0], per_chunk):
                vals = combos[start:start + per_chunk]
                block = np.empty((vals.shape[0], sweep.shape[0], theta_count))
                block[:, :, others] = sweep[None, :, :]
                block[:, :, list(subset)] = vals[:, None, :]
                yield block.reshape(-1, theta_count), n_rest > SWEEP_CAP


def verify_certificate(net, x, p1, p2, value_grid=DEFAULT_VALUE_GRID, seed=0, probes=32,
                       tol=1e-9, use_numba=None, max_violations=20):
    """Brute-force check that no perturbation in the certified set flips the prediction.

    Every set of at most ``floor(r)`` coordinates takes every combination of
    ``value_grid`` values while the remaining coordinates sweep over
    {0.5, 1} (a seeded sample of 512 sweeps when there are more).  Each
    tested perturbation is also checked against the divergence bound at
    lambda = 1 (``chain_failures``) and against the exact per-coordinate
    overlap bound (``n_overlap_failures``).  Perturbations with ``floor(r) + 1`` arbitrary coordinates
    are probed as well and reported as uncertified, not as failures.
    """
    coords, x, atoms, probs = _prepare(net, x, p1, p2, VERIFY_CAP)
    theta = coords.size
    base = exact_smoothed(net, x, p1, p2, use_numba=use_numba)
    c = int(np.argmax(base))
    cert = _certificate(base[c], c, theta, p1, p2, "exact")
    if not cert.certified:
        raise NotCertifiableError(
            f"smoothed top-class score {cert.f_pi0:.6g} with radius {cert.radius:.6g} is not certifiable")
    budget = min(int(math.floor(cert.radius)), theta)
    value_grid = tuple(float(v) for v in value_grid)
    rng = np.random.default_rng(seed)
    report = VerificationReport(cert, budget)
    for block, sampled in _perturbations(theta, budget, value_grid, rng):
        report.sampled |= sampled
        scores = _enumerate(net, coords, block, atoms, probs, x, p1, p2, use_numba)[:, c]
        report.tested_patterns += block.shape[0]
        margins = scores - 0.5
        report.min_margin = min(report.min_margin, float(margins.min()))
        bad = np.flatnonzero(margins <= 0.0)
        report.n_violations += bad.size
        for row in bad[:max(0, max_violations - len(report.violations))]:
            report.violations.append({"delta": block[row].tolist(), "score": float(scores[row])})
        tv = tv_upper_bound(block, p1, p2)
        report.n_overlap_failures += int(np.sum(scores < cert.f_pi0 - tv - tol))
        bounds = cert.f_pi0 - _df_bound_rows(block, theta, p1, p2)
        failed = np.flatnonzero(scores < bounds - tol)
        report.n_chain_failures += failed.size
        report.n_chain_failures_with_half += int(np.sum(np.any(block[failed] == 0.5, axis=1)))
        for row in failed[:max(0, max_violations - len(report.chain_failures))]:
            report.chain_failures.append({"delta": block[row].tolist(),
                                          "score": float(scores[row]),
                                          "bound": float(bounds[row])})
    if budget + 1 <= theta and probes > 0:
        deltas = np.where(rng.random((probes, theta)) < 0.5, 0.5, 1.0)
        for row in deltas:
            pos = rng.choice(theta, budget + 1, replace=False)
            row[pos] = rng.choice(value_grid, budget + 1)
        scores = exact_smoothed(net, x, p1, p2, deltas=deltas, use_numba=use_numba)[:, c]
        report.uncertified_probes = probes
        report.uncertified_flips = int(np.sum(scores <= 0.5))
    return report
