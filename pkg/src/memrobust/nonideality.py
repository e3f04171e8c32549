"""Device non-ideality profiles and the usability score.

A profile combines two factors extracted from the smoothed mean
conductance curve:

* the monotonic factor ``min(lcis_len / required_len, 1)``, where
  ``lcis_len`` is the length of the longest strictly increasing run, and
* the stochastic factor ``exp(-sigma)``, with ``sigma`` the log-normal
  cycle-to-cycle spread.

usability = monotonic factor * stochastic factor.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from . import kernels
from .errors import DomainError, InfeasibleError, InputError, InsufficientDataError

REQUIRED_LEN = 35
SIGMA_VARIANTS = ("mle", "upper95")


def lcis(seq):
    """Longest contiguous strictly increasing run as ``(start, end)``.

    ``end`` is exclusive.  Ties go to the smallest start.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 1 or seq.size == 0:
        raise InputError("lcis needs a non-empty 1-D sequence")
    return kernels.longest_increasing_run(seq)


def sigma_upper_bound(sigma_mle, n):
    """Upper 95% confidence bound on sigma from ``n`` log-ratio samples.

    Uses the 2.5th-percentile chi-square quantile with ``n - 1`` degrees of
    freedom so the bound is never below the MLE.
    """
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {n}")
    q = stats.chi2.ppf(0.025, n - 1)
    return math.sqrt((n - 1) * sigma_mle ** 2 / q)


def estimate_sigma(cond, start, end):
    """MLE of the log-normal spread over points ``[start, end)``.

    Every cycle's conductance at each point is compared against the smoothed
    mean curve.  Returns ``(sigma_mle, sigma_95)``.
    """
    if end <= start:
        raise InputError(f"empty window [{start}, {end})")
    measured = np.asarray(cond.per_cycle, dtype=np.float64)[:, start:end]
    reference = np.asarray(cond.mean_smoothed, dtype=np.float64)[start:end]
    n = measured.size
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {n}")
    if np.any(measured <= 0) or np.any(reference <= 0):
        raise DomainError("conductance must be positive inside the operative window")
    log_ratio = np.log(measured / reference)
    sigma_mle = math.sqrt(float(np.mean(log_ratio ** 2)))
    return sigma_mle, sigma_upper_bound(sigma_mle, n)


def build_ratio_table(mean_curve, start, end, required_len=REQUIRED_LEN):
    """Per-level weight scaling for a curve whose increasing run is too short.

    Returns ``(ratio_table, adjusted_start, adjusted_end)``.  When the run
    ``[start, end)`` already spans ``required_len`` points the table is all
    ones and the window is unchanged.  Otherwise the window is stretched to
    ``required_len`` points (shifted back if it runs off the curve) and
    positions outside the original run take their normalized conductance
    ``(C - c_min) / (c_max - c_min)``.
    """
    mean_curve = np.asarray(mean_curve, dtype=np.float64)
    if required_len < 1:
        raise InputError("required_len must be >= 1")
    n = mean_curve.size
    if n < required_len:
        raise InsufficientDataError(
            f"mean curve has {n} points, fewer than required_len={required_len}")
    ratio = np.ones(required_len)
    if end - start >= required_len:
        return ratio, start, end
    c_min, c_max = mean_curve.min(), mean_curve.max()
    run_start, run_end = start, end
    end = start + required_len
    if end > n:
        start = start - end + n
        end = n
    for i in range(required_len):
        idx = i + start
        if run_start <= idx < run_end:
            continue
        ratio[i] = 1.0 if c_max == c_min else (mean_curve[idx] - c_min) / (c_max - c_min)
    return ratio, start, end


def usability_score(mono_factor, sigma):
    return min(mono_factor, 1.0) * math.exp(-sigma)


@dataclass(frozen=True)
class NonIdealityProfile:
    """Extracted (or synthesized) device model consumed by the simulator.

    ``mono_factor`` is ``min(lcis_len / required_len, 1)`` for measured
    devices.  Synthesized profiles may set it to any value in (0, 1]; the
    integer ``lcis_len`` then only describes the ratio table layout.
    """
    lcis_start: int
    lcis_end: int
    lcis_len: int
    required_len: int
    ratio_table: tuple
    sigma_mle: float
    sigma_95: float
    sigma_variant: str
    usability: float
    c_min: float
    c_max: float
    mono_factor: float

    def __post_init__(self):
        object.__setattr__(self, "ratio_table", tuple(float(r) for r in self.ratio_table))
        if self.sigma_variant not in SIGMA_VARIANTS:
            raise InputError(f"sigma_variant must be one of {SIGMA_VARIANTS}")
        if len(self.ratio_table) != self.required_len:
            raise InputError("ratio_table length must equal required_len")

    @property
    def sigma(self):
        return self.sigma_95 if self.sigma_variant == "upper95" else self.sigma_mle

    @property
    def is_ideal(self):
        return self.sigma == 0.0 and all(r == 1.0 for r in self.ratio_table)

    def recomputed_usability(self):
        return usability_score(self.mono_factor, self.sigma)

    def to_dict(self):
        d = asdict(self)
        d["ratio_table"] = list(self.ratio_table)
        return d

    @classmethod
    def from_dict(cls, d):
        fields = {k: d[k] for k in cls.__dataclass_fields__}
        return cls(**fields)


def compute_profile(cond, required_len=REQUIRED_LEN, sigma_variant="upper95"):
    """Full profile for a conductance set."""
    if sigma_variant not in SIGMA_VARIANTS:
        raise InputError(f"sigma_variant must be one of {SIGMA_VARIANTS}")
    curve = np.asarray(cond.mean_smoothed, dtype=np.float64)
    start, end = lcis(curve)
    table, w_start, w_end = build_ratio_table(curve, start, end, required_len)
    sigma_mle, sigma_95 = estimate_sigma(cond, w_start, w_end)
    length = end - start
    mono = min(length / required_len, 1.0)
    sigma = sigma_95 if sigma_variant == "upper95" else sigma_mle
    return NonIdealityProfile(
        lcis_start=int(start), lcis_end=int(end), lcis_len=int(length),
        required_len=int(required_len), ratio_table=table,
        sigma_mle=sigma_mle, sigma_95=sigma_95, sigma_variant=sigma_variant,
        usability=usability_score(mono, sigma),
        c_min=float(curve.min()), c_max=float(curve.max()), mono_factor=mono,
    )


def ideal_profile(required_len=REQUIRED_LEN):
    return synthesize_profile(1.0, 1.0, required_len)


def synthesize_profile(usability, mono_fraction=1.0, required_len=REQUIRED_LEN):
    """Profile with a prescribed usability, for sweeping without devices.

    The monotonic factor is ``mono_fraction``; the stochastic part is
    ``sigma = ln(mono_fraction / usability)``.  The ratio table is one over
    the first ``round(mono_fraction * required_len)`` levels and then falls
    linearly to ``mono_fraction`` at the top level.
    """
    if not 0.0 < usability <= 1.0:
        raise InputError(f"usability must be in (0, 1], got {usability}")
    if not 0.0 < mono_fraction <= 1.0:
        raise InputError(f"mono_fraction must be in (0, 1], got {mono_fraction}")
    if mono_fraction < usability:
        raise InfeasibleError(
            f"mono_fraction {mono_fraction} < usability {usability} would need sigma < 0")
    sigma = math.log(mono_fraction / usability)
    run = min(required_len, max(1, int(round(mono_fraction * required_len))))
    table = np.ones(required_len)
    tail = required_len - run
    if tail > 0:
        steps = np.arange(1, tail + 1) / tail
        table[run:] = 1.0 - (1.0 - mono_fraction) * steps
    return NonIdealityProfile(
        lcis_start=0, lcis_end=run, lcis_len=run, required_len=required_len,
        ratio_table=table, sigma_mle=sigma, sigma_95=sigma, sigma_variant="upper95",
        usability=usability_score(mono_fraction, sigma),
        c_min=0.0, c_max=1.0, mono_factor=float(mono_fraction),
    )


def _sigma_window(cond, required_len):
    """Window over which :func:`compute_profile` estimates sigma."""
    curve = np.asarray(cond.mean_smoothed, dtype=np.float64)
    start, end = lcis(curve)
    _, ws, we = build_ratio_table(curve, start, end, required_len)
    return ws, we


def _tent(n_points, peak, g0, rel_slope):
    j = np.arange(n_points, dtype=np.float64)
    return g0 * (1.0 + rel_slope * (peak - np.abs(j - peak)))


def realize_profile(profile, n_cycles=8, n_points=None, window=5, g0=1e-4, rel_slope=1e-6,
                    v_max=6.0, device_id="synthetic"):
    """Synthetic I-V sweeps whose extracted profile matches ``profile``.

    The mean conductance follows a tent whose rising edge has
    ``profile.lcis_len`` points; cycle ``i`` is scaled by ``exp(s * z_i)``
    with fixed normal scores ``z_i``, and ``s`` is solved so that the
    extracted sigma (``profile.sigma_variant``) equals ``profile.sigma``.
    Each cycle sweeps 0 -> +v_max -> 0 -> -v_max -> 0; only the rising
    positive branch carries the designed conductance.
    """
    from scipy import optimize

    from .ivdata import IVTrace, extract_conductance

    L = profile.required_len
    mono = profile.lcis_len / L
    if profile.mono_factor < 1.0 and abs(mono - profile.mono_factor) > 1e-12:
        raise InfeasibleError(
            f"mono_factor {profile.mono_factor} is not a multiple of 1/{L}; cannot realize")
    n_points = n_points or L + 5
    if n_points < L:
        raise InputError("n_points must be >= required_len")
    peak = n_points - 1 if profile.mono_factor >= 1.0 else profile.lcis_len - 1
    base = _tent(n_points, peak, g0, rel_slope)
    z = stats.norm.ppf((np.arange(n_cycles) + 0.5) / n_cycles)
    z = z / np.sqrt(np.mean(z ** 2))
    v_up = np.linspace(v_max / n_points, v_max, n_points)
    v_down = v_up[::-1][1:]
    v_neg = -v_up
    v_tail = np.concatenate((v_neg, v_neg[::-1][1:], [0.0]))

    def build(s):
        cycles = []
        for zi in z:
            g = base * math.exp(s * zi)
            cur_up = g * v_up
            cur_down = g[::-1][1:] * v_down
            cur_tail = g0 * v_tail
            v = np.concatenate(([0.0], v_up, v_down, v_tail))
            i = np.concatenate(([0.0], cur_up, cur_down, cur_tail))
            cycles.append(np.column_stack((v, i)))
        return IVTrace(device_id=device_id, cycles=cycles)

    def profile_of(s):
        cond = extract_conductance(build(s), window)
        return compute_profile(cond, L, profile.sigma_variant), cond

    target = profile.sigma
    got, cond0 = profile_of(0.0)
    if got.lcis_len != profile.lcis_len and not (profile.mono_factor >= 1.0 and got.lcis_len >= L):
        raise InfeasibleError(f"tent realization gives lcis {got.lcis_len}, wanted {profile.lcis_len}")
    if target == 0.0:
        # identical cycles; only the smoothing residual at the curve ends remains
        return build(0.0)
    if got.sigma > target:
        raise InfeasibleError(f"baseline sigma {got.sigma:.3g} already exceeds target {target:.3g}")

    # Scaling cycle i by exp(s z_i) scales the smoothed mean by M(s) = mean exp(s z)
    # and leaves the operative window alone, so the log ratios are
    # c_j + s z_i - ln M(s) with c_j the baseline residual at s = 0.
    ws, we = _sigma_window(cond0, L)
    c = np.log(cond0.per_cycle[0, ws:we] / cond0.mean_smoothed[ws:we])
    n = n_cycles * (we - ws)
    factor = got.sigma / got.sigma_mle if got.sigma_mle > 0 else 1.0

    def sigma_closed(s):
        log_m = np.log(np.mean(np.exp(s * z)))
        r = c[None, :] + s * z[:, None] - log_m
        mle = math.sqrt(float(np.mean(r * r)))
        return mle * factor if profile.sigma_variant == "upper95" else mle

    if got.sigma_mle == 0.0 and profile.sigma_variant == "upper95":
        factor = math.sqrt((n - 1) / stats.chi2.ppf(0.025, n - 1))
    hi = 1.0
    while sigma_closed(hi) < target:
        hi *= 2.0
        if hi > 64:
            raise InfeasibleError(f"cannot reach sigma {target}")
    s = optimize.brentq(lambda t: sigma_closed(t) - target, 0.0, hi, xtol=1e-15, rtol=1e-15)
    return build(s)
