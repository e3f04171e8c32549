"""Simulated memristive hardware: weight drift and crossbar matrix-vector products.

Two levels of detail are provided.  :func:`map_weights` perturbs weight
matrices directly (ratio-table lookup plus log-normal drift).
:func:`crossbar_matvec` goes through an explicit differential-pair
conductance encoding on a finite crossbar.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InputError
from .fileio import atomic_write_text
from .nonideality import NonIdealityProfile, ideal_profile, synthesize_profile  # noqa: F401

DEFAULT_USABILITIES = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)


def _level_index(a, n_levels):
    idx = np.floor(a * (n_levels - 1)).astype(np.int64)
    return np.clip(idx, 0, n_levels - 1)


def map_weights(params, profile, seed=None):
    """Apply device drift to each weight matrix independently.

    Each entry is normalised by the matrix's largest magnitude, looked up in
    the ratio table and multiplied by ``exp(lambda)`` with
    ``lambda ~ N(0, sigma^2)``.  Returns new arrays; inputs are not
    modified.
    """
    rng = np.random.default_rng(seed)
    table = np.asarray(profile.ratio_table, dtype=np.float64)
    sigma = profile.sigma
    out = []
    for theta in params:
        theta = np.asarray(theta, dtype=np.float64)
        if not np.all(np.isfinite(theta)):
            raise DomainError("weights must be finite")
        peak = np.max(np.abs(theta)) if theta.size else 0.0
        if peak == 0.0:
            out.append(theta.copy())
            continue
        ratio = table[_level_index(np.abs(theta) / peak, table.size)]
        if sigma > 0:
            drift = np.exp(rng.normal(0.0, sigma, size=theta.shape))
            out.append(theta * ratio * drift)
        else:
            out.append(theta * ratio)
    return out


def map_network(net, profile, seed=None, layers=None):
    """Copy of ``net`` with drift applied to the chosen layers (default all)."""
    chosen = range(len(net.layers)) if layers is None else layers
    chosen = sorted(set(chosen))
    if any(i < 0 or i >= len(net.layers) for i in chosen):
        raise InputError(f"layer index out of range for a {len(net.layers)}-layer network")
    mapped = map_weights([net.layers[i].weights for i in chosen], profile, seed)
    weights = [layer.weights for layer in net.layers]
    for i, w in zip(chosen, mapped):
        weights[i] = w
    return net.with_weights(weights)


def _check_trials(trials):
    if int(trials) != trials or trials < 1:
        raise InputError(f"trials must be a positive integer, got {trials}")


def _mean_std(values):
    values = np.asarray(values, dtype=np.float64)
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), std


def evaluate_under_profile(net, profile, dataset, trials=10, seed=0, layers=None,
                           split="test", return_all=False):
    """Mean and sample std of accuracy over independently drifted copies.

    Trial ``t`` draws its drift from ``default_rng([seed, t])``.
    """
    from .neural import accuracy

    _check_trials(trials)
    X, y = dataset.part(split) if hasattr(dataset, "part") else dataset
    if len(y) == 0:
        raise InputError(f"{split} split is empty")
    accs = [accuracy(map_network(net, profile, [seed, t], layers), X, y) for t in range(trials)]
    mean, std = _mean_std(accs)
    return (mean, std, accs) if return_all else (mean, std)


# ---------------------------------------------------------------------------
# crossbar
# ---------------------------------------------------------------------------

@dataclass
class CrossbarModel:
    """Differential-pair crossbar.

    A weight matrix ``W`` (out x in) occupies ``out`` rows and ``2 * in``
    columns.  Weight ``w`` is stored as ``G+ = g_mid + w*s/2`` and
    ``G- = g_mid - w*s/2`` where ``g_mid`` is the middle of the range and
    ``s = (g_max - g_min) / max|W|``, so both members stay in
    ``[g_min, g_max]``.

    With ``unbiased=True`` the programming drift is ``exp(lambda - sigma^2/2)``
    so each conductance is correct on average.
    """
    rows: int = 10
    cols: int = 10
    g_min: float = 1e-6
    g_max: float = 1e-4
    profile: NonIdealityProfile = field(default_factory=ideal_profile)
    mapping: str = "differential-pair"
    unbiased: bool = True

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InputError("crossbar needs at least one row and one column")
        if not 0 < self.g_min < self.g_max:
            raise InputError(f"need 0 < g_min < g_max, got {self.g_min}, {self.g_max}")
        if self.mapping != "differential-pair":
            raise InputError(f"unsupported mapping {self.mapping!r}")

    @classmethod
    def from_profile(cls, profile, rows=10, cols=10, **kw):
        """Use the profile's conductance range when it is physical."""
        if profile.c_min > 0 and profile.c_max > profile.c_min:
            kw.setdefault("g_min", profile.c_min)
            kw.setdefault("g_max", profile.c_max)
        return cls(rows=rows, cols=cols, profile=profile, **kw)

    def fits(self, shape):
        out, n_in = shape
        return out <= self.rows and 2 * n_in <= self.cols

    def encode(self, W):
        """Ideal conductance pair ``(G+, G-)`` and the weight-to-siemens scale."""
        W = np.asarray(W, dtype=np.float64)
        if W.ndim != 2:
            raise InputError("weight block must be a matrix")
        if not self.fits(W.shape):
            raise InputError(
                f"{W.shape[0]}x{W.shape[1]} weights need {W.shape[0]} rows and "
                f"{2 * W.shape[1]} columns; crossbar is {self.rows}x{self.cols}")
        if not np.all(np.isfinite(W)):
            raise DomainError("weights must be finite")
        peak = float(np.max(np.abs(W))) if W.size else 0.0
        scale = (self.g_max - self.g_min) / peak if peak > 0 else 1.0
        g_mid = 0.5 * (self.g_min + self.g_max)
        half = 0.5 * W * scale
        return g_mid + half, g_mid - half, scale

    def program(self, G, rng):
        """Conductances actually reached when targeting ``G``."""
        table = np.asarray(self.profile.ratio_table, dtype=np.float64)
        level = (G - self.g_min) / (self.g_max - self.g_min)
        out = G * table[_level_index(np.clip(level, 0.0, 1.0), table.size)]
        sigma = self.profile.sigma
        if sigma > 0:
            shift = 0.5 * sigma * sigma if self.unbiased else 0.0
            out = out * np.exp(rng.normal(0.0, sigma, size=G.shape) - shift)
        return out


def crossbar_matvec(model, W, x, seed=None):
    """``W @ x`` computed through a programmed crossbar.

    ``x`` may be one vector or a batch of row vectors; the crossbar is
    programmed once per call and reused for the whole batch.
    """
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise InputError(f"input length {x.shape[-1]} does not match weight columns {W.shape[1]}")
    g_pos, g_neg, scale = model.encode(W)
    rng = np.random.default_rng(seed)
    g_pos = model.program(g_pos, rng)
    g_neg = model.program(g_neg, rng)
    return (x @ (g_pos - g_neg).T) / scale


def crossbar_forward(net, model, X, seed=None, layers=(0,)):
    """Network outputs with the chosen layers' products run on the crossbar.

    Each chosen layer gets its own freshly programmed array.
    """
    from .neural import _activate, _check_input

    h = _check_input(net, X)
    rng = np.random.default_rng(seed)
    chosen = set(layers)
    for i, layer in enumerate(net.layers):
        if i in chosen:
            z = crossbar_matvec(model, layer.weights, h, rng) + layer.bias
        else:
            z = h @ layer.weights.T + layer.bias
        h = _activate(z, layer.activation)
    return h


def crossbar_accuracy(net, model, X, y, seed=None, layers=(0,)):
    probs = crossbar_forward(net, model, X, seed, layers)
    return float(np.mean(np.argmax(probs, axis=-1) == y))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def run_sweep(models, dataset, usabilities=DEFAULT_USABILITIES, trials=10, seed=0,
              mono_fraction=1.0, layers=None):
    """Accuracy of each named model over a usability grid.

    Profiles come from :func:`synthesize_profile` with the given
    ``mono_fraction`` (raised to the target where it would be infeasible).
    Returns per-trial rows ``(usability, method, trial, accuracy)``.
    """
    _check_trials(trials)
    rows = []
    for u in usabilities:
        # a mixed sweep cannot put the monotonic factor below the target
        profile = synthesize_profile(u, max(mono_fraction, u))
        for name in models:
            _, _, accs = evaluate_under_profile(models[name], profile, dataset, trials, seed,
                                                layers=layers, return_all=True)
            rows.extend((float(u), name, t, a) for t, a in enumerate(accs))
    return rows


def aggregate_sweep(rows):
    """``(usability, method, mean, std)`` per group, in first-seen order."""
    groups = {}
    for u, method, _, acc in rows:
        groups.setdefault((u, method), []).append(acc)
    return [(u, m) + _mean_std(a) for (u, m), a in groups.items()]


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def format_csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_sweep_csvs(rows, trial_path, aggregate_path):
    atomic_write_text(trial_path, format_csv(("usability", "method", "trial", "accuracy"), rows))
    atomic_write_text(aggregate_path,
                      format_csv(("usability", "method", "mean", "std"), aggregate_sweep(rows)))


def lognormal_mean_factor(sigma):
    """First moment of ``exp(N(0, sigma^2))``."""
    return math.exp(0.5 * sigma * sigma)
