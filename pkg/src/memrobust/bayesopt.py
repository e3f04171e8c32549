"""Gaussian-process Bayesian optimisation over finite grids.

The surrogate uses a squared-exponential kernel and a constant prior mean
equal to the mean of the observed values.  The acquisition function is
Expected Improvement, maximised exhaustively over the unobserved grid.
Everything is maximisation.
"""

import datetime as _dt
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, stats

from .errors import ExhaustedError, InputError, NumericalError
from .fileio import read_json, write_json

LENGTHSCALE_BOUNDS = (0.05, 5.0)
# relative to the variance of the observed values, like the signal bounds
NOISE_BOUNDS = (1e-8, 1.0)
MAX_JITTER = 1e-6
N_STARTS = 8

FABRICATION_DIMENSIONS = (
    ("perovskite", "categorical", ("MAPbCl3", "MAPbBr3", "MAPbI3", "CsPbI3", "FAPbI3", "FAPbBr3"), ""),
    ("nw_length", "numeric", (0.6, 1.0, 1.2, 1.5, 1.8, 2.0, 2.5, 3.0), "um"),
    ("nw_diameter", "numeric", (10.0, 50.0, 100.0, 150.0, 200.0, 250.0, 300.0), "nm"),
    ("pb_ed_time", "numeric", (5.0, 10.0, 15.0, 20.0, 25.0), "min"),
    ("ag_thickness", "numeric", (50.0, 100.0, 200.0, 400.0, 600.0), "nm"),
)


# ---------------------------------------------------------------------------
# search space
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str
    levels: tuple
    unit: str = ""

    def __post_init__(self):
        if self.kind not in ("categorical", "numeric"):
            raise InputError(f"dimension {self.name!r}: kind must be categorical or numeric")
        levels = tuple(self.levels)
        if not levels:
            raise InputError(f"dimension {self.name!r} has no levels")
        if self.kind == "numeric":
            levels = tuple(sorted(float(v) for v in levels))
            if any(not math.isfinite(v) for v in levels):
                raise InputError(f"dimension {self.name!r} has non-finite levels")
        else:
            levels = tuple(str(v) for v in levels)
        if len(set(levels)) != len(levels):
            raise InputError(f"dimension {self.name!r} has duplicate levels")
        object.__setattr__(self, "levels", levels)

    @property
    def codes(self):
        n = len(self.levels)
        if n == 1:
            return np.zeros(1)
        if self.kind == "categorical":
            return np.arange(n) / (n - 1)
        lv = np.array(self.levels)
        return (lv - lv[0]) / (lv[-1] - lv[0])

    def index_of(self, value):
        if self.kind == "categorical":
            if str(value) in self.levels:
                return self.levels.index(str(value))
            raise InputError(f"{self.name}: {value!r} is not a level; choose from {list(self.levels)}")
        try:
            v = float(value)
        except (TypeError, ValueError):
            raise InputError(f"{self.name}: {value!r} is not numeric") from None
        lv = np.array(self.levels)
        hit = np.flatnonzero(np.abs(lv - v) <= 1e-9 * np.maximum(1.0, np.abs(lv)))
        if hit.size:
            return int(hit[0])
        order = np.argsort(np.abs(lv - v), kind="stable")[:2]
        near = sorted(self.levels[i] for i in order)
        raise InputError(f"{self.name}: {v} is off-grid; nearest grid values are {near}")

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "levels": list(self.levels), "unit": self.unit}


class SearchSpace:
    """Cartesian grid over ordered dimensions.

    Grid points are numbered in ``itertools.product`` order.  Level codes
    increase with level index, so grid order equals the lexicographic order
    of encoded vectors.
    """

    def __init__(self, dimensions, expected_size=None):
        dims = [d if isinstance(d, Dimension) else Dimension(*d) for d in dimensions]
        if not dims:
            raise InputError("search space needs at least one dimension")
        names = [d.name for d in dims]
        if len(set(names)) != len(names):
            raise InputError("dimension names must be unique")
        self.dimensions = tuple(dims)
        self.size = int(np.prod([len(d.levels) for d in dims]))
        if self.size < 2:
            raise InputError("search space grid must have at least 2 points")
        if expected_size is not None and int(expected_size) != self.size:
            raise InputError(f"grid has {self.size} points but the config expects {expected_size}")
        self._encoded = None

    @classmethod
    def fabrication(cls):
        return cls(FABRICATION_DIMENSIONS, expected_size=8400)

    @property
    def names(self):
        return [d.name for d in self.dimensions]

    @property
    def ndim(self):
        return len(self.dimensions)

    def _shape(self):
        return tuple(len(d.levels) for d in self.dimensions)

    def encoded_grid(self):
        """All grid points encoded, shape ``(size, ndim)``."""
        if self._encoded is None:
            codes = [d.codes for d in self.dimensions]
            self._encoded = np.array(list(itertools.product(*codes)), dtype=np.float64)
        return self._encoded

    def _as_mapping(self, config):
        if isinstance(config, dict):
            missing = [n for n in self.names if n not in config]
            extra = [k for k in config if k not in self.names]
            if missing or extra:
                raise InputError(f"configuration keys mismatch; missing {missing}, unknown {extra}")
            return config
        config = list(config)
        if len(config) != self.ndim:
            raise InputError(f"configuration needs {self.ndim} values, got {len(config)}")
        return dict(zip(self.names, config))

    def level_indices(self, config):
        config = self._as_mapping(config)
        return tuple(d.index_of(config[d.name]) for d in self.dimensions)

    def index(self, config):
        return int(np.ravel_multi_index(self.level_indices(config), self._shape()))

    def config_at(self, index):
        if not 0 <= index < self.size:
            raise InputError(f"grid index {index} out of range")
        idx = np.unravel_index(int(index), self._shape())
        return {d.name: d.levels[i] for d, i in zip(self.dimensions, idx)}

    def canonical(self, config):
        """The exact grid representative of ``config``."""
        return self.config_at(self.index(config))

    def encode(self, config):
        idx = self.level_indices(config)
        return np.array([d.codes[i] for d, i in zip(self.dimensions, idx)])

    def decode(self, point):
        point = np.asarray(point, dtype=np.float64).reshape(-1)
        if point.size != self.ndim:
            raise InputError(f"encoded point needs {self.ndim} coordinates")
        out = {}
        for d, c in zip(self.dimensions, point):
            i = int(np.argmin(np.abs(d.codes - c)))
            out[d.name] = d.levels[i]
        return out

    def to_dict(self):
        return {"dimensions": [d.to_dict() for d in self.dimensions], "size": self.size}

    @classmethod
    def from_dict(cls, d):
        dims = [Dimension(x["name"], x["kind"], tuple(x.get("levels", x.get("values", ()))),
                          x.get("unit", "")) for x in d["dimensions"]]
        return cls(dims, expected_size=d.get("size"))

    def __eq__(self, other):
        return isinstance(other, SearchSpace) and self.dimensions == other.dimensions


# ---------------------------------------------------------------------------
# Gaussian process
# ---------------------------------------------------------------------------

def sq_dists(A, B):
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def se_kernel(A, B, lengthscale, signal):
    return signal * np.exp(-0.5 * sq_dists(A, B) / (lengthscale * lengthscale))


def _cholesky(K):
    """Cholesky factor with escalating diagonal jitter; returns ``(L, jitter)``."""
    jitter = 0.0
    n = K.shape[0]
    while True:
        try:
            return linalg.cholesky(K + jitter * np.eye(n), lower=True), jitter
        except linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 10.0
            if jitter > MAX_JITTER * (1 + 1e-9):
                raise NumericalError("Gram matrix is not positive definite even with jitter 1e-6") from None


@dataclass
class GPState:
    X: np.ndarray
    y: np.ndarray
    lengthscale: float
    signal: float
    noise: float
    mean: float = 0.0
    jitter: float = 0.0
    chol: np.ndarray = field(default=None, repr=False)
    alpha: np.ndarray = field(default=None, repr=False)

    def predict(self, Xs, clip=True):
        """Posterior mean and variance at the rows of ``Xs``."""
        Xs = np.atleast_2d(np.asarray(Xs, dtype=np.float64))
        Ks = se_kernel(Xs, self.X, self.lengthscale, self.signal)
        mu = self.mean + Ks @ self.alpha
        v = linalg.solve_triangular(self.chol, Ks.T, lower=True)
        var = self.signal - np.sum(v * v, axis=0)
        return mu, (np.maximum(var, 0.0) if clip else var)

    def log_marginal_likelihood(self):
        r = self.y - self.mean
        n = r.size
        return float(-0.5 * r @ self.alpha - np.log(np.diag(self.chol)).sum()
                     - 0.5 * n * math.log(2 * math.pi))

    def hyper(self):
        return {"lengthscale": self.lengthscale, "signal": self.signal, "noise": self.noise}


def _build(X, y, lengthscale, signal, noise):
    mean = float(np.mean(y))
    K = se_kernel(X, X, lengthscale, signal) + noise * np.eye(len(y))
    L, jitter = _cholesky(K)
    alpha = linalg.cho_solve((L, True), y - mean)
    return GPState(X, y, float(lengthscale), float(signal), float(noise), mean, jitter, L, alpha)


def _neg_lml(log_params, X, y, D):
    ls, sig, noise = np.exp(log_params)
    r = y - y.mean()
    n = r.size
    Kf = sig * np.exp(-0.5 * D / (ls * ls))
    K = Kf + noise * np.eye(n)
    try:
        L = linalg.cholesky(K, lower=True)
    except linalg.LinAlgError:
        return 1e25, np.zeros(3)
    a = linalg.cho_solve((L, True), r)
    nll = 0.5 * r @ a + np.log(np.diag(L)).sum() + 0.5 * n * math.log(2 * math.pi)
    inner = np.outer(a, a) - linalg.cho_solve((L, True), np.eye(n))
    grads = (
        -0.5 * np.sum(inner * (Kf * D / (ls * ls))),
        -0.5 * np.sum(inner * Kf),
        -0.5 * noise * np.trace(inner),
    )
    return float(nll), np.array(grads)


def gp_fit(X, y, mode="mle", lengthscale=0.5, noise=1e-6, signal=None, seed=0,
           n_starts=N_STARTS):
    """Fit a GP to encoded points ``X`` and values ``y``.

    ``mode="fixed"`` uses the given hyperparameters (``signal`` defaults to
    1).  ``mode="mle"`` maximises the log marginal likelihood over
    lengthscale, signal variance and noise variance with ``n_starts``
    seeded L-BFGS-B starts.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size < 1:
        raise InputError("gp_fit needs at least one observation")
    if X.shape[0] != y.size:
        raise InputError("X and y disagree on the number of observations")
    if not np.all(np.isfinite(y)):
        raise InputError("observed values must be finite")
    if mode == "fixed":
        return _build(X, y, lengthscale, 1.0 if signal is None else signal, noise)
    if mode != "mle":
        raise InputError(f"unknown hyperparameter mode {mode!r}")
    scale = float(np.var(y)) if y.size > 1 and np.var(y) > 0 else 1.0
    bounds = [tuple(np.log(LENGTHSCALE_BOUNDS)),
              (math.log(scale * 1e-3), math.log(scale * 1e3)),
              (math.log(scale * NOISE_BOUNDS[0]), math.log(scale * NOISE_BOUNDS[1]))]
    if y.size == 1:
        # nothing to learn from one point
        return _build(X, y, 0.5, scale, NOISE_BOUNDS[0])
    D = sq_dists(X, X)
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    starts = [np.array([math.log(0.5), math.log(scale), math.log(scale * 1e-4)])]
    starts += list(rng.uniform(lo, hi, size=(n_starts - 1, 3)))
    best = None
    for x0 in starts:
        res = optimize.minimize(_neg_lml, x0, args=(X, y, D), jac=True, method="L-BFGS-B",
                                bounds=bounds)
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun - 1e-12):
            best = res
    if best is None:
        raise NumericalError("marginal likelihood optimisation failed from every start")
    # exp(log(b)) can land a hair outside b
    ls, sig, noise = np.clip(np.exp(best.x),
                             [LENGTHSCALE_BOUNDS[0], scale * 1e-3, scale * NOISE_BOUNDS[0]],
                             [LENGTHSCALE_BOUNDS[1], scale * 1e3, scale * NOISE_BOUNDS[1]])
    return _build(X, y, ls, sig, noise)


def ei_from_moments(mu, s, best, xi=0.0):
    """Expected Improvement for posterior mean ``mu`` and std ``s``."""
    mu = np.asarray(mu, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    imp = mu - best - xi
    safe = np.where(s > 0, s, 1.0)
    z = imp / safe
    ei = imp * stats.norm.cdf(z) + safe * stats.norm.pdf(z)
    ei = np.where(s > 0, ei, np.maximum(imp, 0.0))
    return np.maximum(ei, 0.0)


def expected_improvement(gp, points, best, xi=0.0):
    mu, var = gp.predict(points)
    return ei_from_moments(mu, np.sqrt(var), best, xi)


def default_xi(values, frac=0.01):
    values = np.asarray(values, dtype=np.float64)
    return frac * float(values.max() - values.min()) if values.size else 0.0


def ei_argmax(gp, candidates, best, xi=0.0):
    """Position of the largest EI among ``candidates`` (first wins ties).

    ``candidates`` must already be in lexicographic order of encoding.
    """
    ei = expected_improvement(gp, candidates, best, xi)
    return int(np.argmax(ei)), ei


# ---------------------------------------------------------------------------
# campaign state (ask / tell)
# ---------------------------------------------------------------------------

def _now():
    return _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()


@dataclass
class CampaignState:
    space: SearchSpace
    history: list = field(default_factory=list)
    hyper: dict = field(default_factory=dict)
    pending: dict | None = None
    seed: int = 0
    n_init: int = 1
    xi_frac: float = 0.01
    warnings: list = field(default_factory=list)

    def observed_indices(self):
        return sorted({self.space.index(h["config"]) for h in self.history})

    def values(self):
        return np.array([h["value"] for h in self.history], dtype=np.float64)

    def best(self):
        if not self.history:
            return None
        k = int(np.argmax(self.values()))
        return self.history[k]

    def fit(self):
        X = np.array([self.space.encode(h["config"]) for h in self.history])
        y = self.values()
        if self.hyper:
            return gp_fit(X, y, "fixed", **self.hyper)
        return gp_fit(X, y, "mle", seed=self.seed)

    def to_dict(self):
        return {
            "format": 1,
            "space": self.space.to_dict(),
            "history": self.history,
            "hyper": self.hyper,
            "pending": self.pending,
            "seed": self.seed,
            "n_init": self.n_init,
            "xi_frac": self.xi_frac,
            "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != 1:
            raise InputError(f"unsupported campaign format {d.get('format')!r}")
        return cls(space=SearchSpace.from_dict(d["space"]), history=list(d["history"]),
                   hyper=dict(d["hyper"]), pending=d["pending"], seed=int(d["seed"]),
                   n_init=int(d["n_init"]), xi_frac=float(d["xi_frac"]),
                   warnings=list(d["warnings"]))

    def save(self, path):
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))


def suggest(state):
    """Next configuration to measure; recorded as ``state.pending``.

    Before ``n_init`` observations the pick is a seeded uniform draw among
    unobserved points; afterwards it is the EI argmax over them.
    """
    space = state.space
    seen = set(state.observed_indices())
    free = np.array([i for i in range(space.size) if i not in seen], dtype=np.int64)
    if free.size == 0:
        raise ExhaustedError("every grid point has been observed")
    if len(state.history) < state.n_init:
        rng = np.random.default_rng([state.seed, len(state.history)])
        choice = int(free[rng.integers(free.size)])
    else:
        gp = state.fit()
        y = state.values()
        k, _ = ei_argmax(gp, space.encoded_grid()[free], float(y.max()),
                         default_xi(y, state.xi_frac))
        choice = int(free[k])
    config = space.config_at(choice)
    state.pending = config
    return config


def tell(state, config, value, timestamp=None, note="", refit=True):
    """Record a measurement and refresh the GP hyperparameters."""
    space = state.space
    config = space.canonical(config)
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise InputError(f"objective value {value!r} is not numeric") from None
    if not math.isfinite(value):
        raise InputError("objective value must be finite")
    idx = space.index(config)
    if idx in set(state.observed_indices()):
        state.warnings.append(f"replicate measurement of grid point {idx}")
    state.history.append({"config": config, "value": value,
                          "timestamp": timestamp or _now(), "note": note})
    if state.pending is not None and space.index(state.pending) == idx:
        state.pending = None
    if refit:
        X = np.array([space.encode(h["config"]) for h in state.history])
        gp = gp_fit(X, state.values(), "mle", seed=state.seed)
        state.hyper = gp.hyper()
    return state


# ---------------------------------------------------------------------------
# noise-spec search
# ---------------------------------------------------------------------------

DEFAULT_ALPHA_GRID = tuple((p1, p2) for p1 in (0.0, 0.05, 0.1, 0.2, 0.3)
                           for p2 in (0.0, 0.1, 0.2, 0.3, 0.4) if p1 + p2 <= 1.0)
DEFAULT_ALPHA_USABILITIES = (1.0, 0.7, 0.5, 0.3)


@dataclass
class AlphaResult:
    best: tuple
    best_score: float
    trace: list

    def to_dict(self):
        return {"best": list(self.best), "best_score": self.best_score,
                "trace": [{"p1": a[0], "p2": a[1], "score": s} for a, s in self.trace]}


def _alpha_encoding(grid):
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(0), g.max(0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (g - lo) / span


def optimize_alpha(template, dataset, alpha_space=DEFAULT_ALPHA_GRID, budget=8, profiles=None,
                   seed=0, trials=5, train_kw=None, score_fn=None):
    """Search the (p1, p2) grid for the most robust noise spec.

    The score of a spec is the test accuracy of a BayesMulti-trained copy of
    ``template``, averaged over ``trials`` drifted copies per profile and
    then over ``profiles``.  The first evaluation is ``(0, 0)`` when it is
    on the grid; later ones follow GP-EI.  Ties between equal scores go to
    the earlier grid entry.
    """
    from .memsim import evaluate_under_profile
    from .neural import MultinomialNoiseSpec, train
    from .nonideality import synthesize_profile

    grid = [tuple(float(v) for v in a) for a in alpha_space]
    if not grid:
        raise InputError("alpha grid is empty")
    for p1, p2 in grid:
        MultinomialNoiseSpec(p1, p2)
    if budget < 2 and len(grid) > 1:
        raise InputError("budget must be >= 2")
    if profiles is None:
        profiles = [synthesize_profile(u, 1.0) for u in DEFAULT_ALPHA_USABILITIES]
    train_kw = dict(train_kw or {})

    def default_score(alpha):
        net, _ = train(template, dataset, "bayesmulti", spec=alpha, seed=seed, **train_kw)
        return float(np.mean([evaluate_under_profile(net, p, dataset, trials, seed)[0]
                              for p in profiles]))

    score = score_fn or default_score
    enc = _alpha_encoding(grid)
    n_eval = min(budget, len(grid))
    done = {}
    first = grid.index((0.0, 0.0)) if (0.0, 0.0) in grid else \
        int(np.random.default_rng([seed, 0]).integers(len(grid)))
    order = [first]
    done[first] = score(grid[first])
    while len(done) < n_eval:
        idx = sorted(done)
        free = [i for i in range(len(grid)) if i not in done]
        y = np.array([done[i] for i in idx])
        gp = gp_fit(enc[idx], y, "mle", seed=seed)
        k, _ = ei_argmax(gp, enc[free], float(y.max()), default_xi(y))
        nxt = free[k]
        order.append(nxt)
        done[nxt] = score(grid[nxt])
    ranked = sorted(done)
    best_i = ranked[int(np.argmax([done[i] for i in ranked]))]
    return AlphaResult(grid[best_i], done[best_i], [(grid[i], done[i]) for i in order])
