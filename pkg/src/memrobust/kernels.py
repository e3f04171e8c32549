"""Hot numeric kernels with numba and pure-numpy implementations.

Every public function takes ``use_numba=None``; ``None`` defers to
:data:`memrobust._accel.USE_NUMBA`.  Both paths compute the same quantity,
but floating-point summation order differs, so results agree to rounding
(about 1e-15 relative), not bit for bit.  Each path on its own is
deterministic.

Dense networks are passed to the kernels as a flat parameter vector plus a
layout tuple ``(dims, acts, w_off, b_off)``; see
:meth:`memrobust.neural.DenseNetwork.layout`.
"""

import numpy as np

from . import _accel
from ._accel import njit

ACT_IDENTITY = 0
ACT_RELU = 1
ACT_SOFTMAX = 2


def _pick(use_numba):
    return _accel.USE_NUMBA if use_numba is None else (use_numba and _accel.HAVE_NUMBA)


# ---------------------------------------------------------------------------
# longest strictly increasing contiguous run
# ---------------------------------------------------------------------------

@njit
def _increasing_run_nb(seq):
    n = seq.shape[0]
    best_start = 0
    best_len = 1 if n > 0 else 0
    start = 0
    for i in range(1, n):
        if not seq[i] > seq[i - 1]:
            start = i
        cur = i - start + 1
        if cur > best_len:
            best_len = cur
            best_start = start
    return best_start, best_start + best_len


def _increasing_run_np(seq):
    n = seq.shape[0]
    # run boundaries: positions where the strict increase breaks
    breaks = np.flatnonzero(~(seq[1:] > seq[:-1])) + 1
    starts = np.concatenate(([0], breaks))
    ends = np.concatenate((breaks, [n]))
    k = int(np.argmax(ends - starts))  # first maximum -> smallest start
    return int(starts[k]), int(ends[k])


def longest_increasing_run(seq, use_numba=None):
    """Return ``(start, end)`` of the longest strictly increasing run."""
    seq = np.ascontiguousarray(seq, dtype=np.float64)
    if _pick(use_numba):
        s, e = _increasing_run_nb(seq)
        return int(s), int(e)
    return _increasing_run_np(seq)


# ---------------------------------------------------------------------------
# dense network forward over a batch of parameter vectors, single input
# ---------------------------------------------------------------------------

@njit
def _forward_into(params, dims, acts, w_off, b_off, x, h, g):
    n_layers = dims.shape[0] - 1
    for i in range(dims[0]):
        h[i] = x[i]
    n_out = dims[0]
    for layer in range(n_layers):
        n_in = dims[layer]
        n_out = dims[layer + 1]
        wo = w_off[layer]
        bo = b_off[layer]
        for o in range(n_out):
            s = params[bo + o]
            row = wo + o * n_in
            for i in range(n_in):
                s += params[row + i] * h[i]
            g[o] = s
        _activate(g, n_out, acts[layer])
        for o in range(n_out):
            h[o] = g[o]
    return n_out


@njit
def _forward_batch_nb(params_batch, dims, acts, w_off, b_off, x):
    width = dims.max()
    h = np.empty(width)
    g = np.empty(width)
    n_cls = dims[-1]
    out = np.empty((params_batch.shape[0], n_cls))
    for b in range(params_batch.shape[0]):
        _forward_into(params_batch[b], dims, acts, w_off, b_off, x, h, g)
        for c in range(n_cls):
            out[b, c] = h[c]
    return out


def _forward_batch_np(params_batch, dims, acts, w_off, b_off, x):
    n = params_batch.shape[0]
    h = np.broadcast_to(np.asarray(x, dtype=np.float64), (n, dims[0]))
    for layer in range(len(dims) - 1):
        n_in, n_out = dims[layer], dims[layer + 1]
        wo, bo = w_off[layer], b_off[layer]
        W = params_batch[:, wo:wo + n_out * n_in].reshape(n, n_out, n_in)
        z = np.einsum("boi,bi->bo", W, h) + params_batch[:, bo:bo + n_out]
        act = acts[layer]
        if act == ACT_RELU:
            z = np.maximum(z, 0.0)
        elif act == ACT_SOFTMAX:
            z = np.exp(z - z.max(axis=1, keepdims=True))
            z /= z.sum(axis=1, keepdims=True)
        h = z
    return np.array(h)


def forward_batch(params_batch, layout, x, use_numba=None):
    """Evaluate one input ``x`` under many parameter vectors.

    ``params_batch`` has shape ``(B, P)``; returns ``(B, n_out)``.
    """
    dims, acts, w_off, b_off = layout
    params_batch = np.ascontiguousarray(params_batch, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _pick(use_numba):
        return _forward_batch_nb(params_batch, dims, acts, w_off, b_off, x)
    return _forward_batch_np(params_batch, dims, acts, w_off, b_off, x)


# ---------------------------------------------------------------------------
# exact expectation over the multinomial support, for many perturbations
# ---------------------------------------------------------------------------

@njit
def _enumerate_nb(params, coord_idx, deltas, atoms, atom_probs, dims, acts, w_off, b_off, x):
    width = dims.max()
    h = np.empty(width)
    g = np.empty(width)
    n_cls = dims[-1]
    work = params.copy()
    n_coord = coord_idx.shape[0]
    out = np.zeros((deltas.shape[0], n_cls))
    for d in range(deltas.shape[0]):
        for a in range(atoms.shape[0]):
            for j in range(n_coord):
                k = coord_idx[j]
                work[k] = params[k] * deltas[d, j] * atoms[a, j]
            _forward_into(work, dims, acts, w_off, b_off, x, h, g)
            p = atom_probs[a]
            for c in range(n_cls):
                out[d, c] += p * h[c]
    return out


@njit
def _activate(g, n, act):
    if act == 1:
        for o in range(n):
            if g[o] < 0.0:
                g[o] = 0.0
    elif act == 2:
        m = g[0]
        for o in range(1, n):
            if g[o] > m:
                m = g[o]
        tot = 0.0
        for o in range(n):
            g[o] = np.exp(g[o] - m)
            tot += g[o]
        for o in range(n):
            g[o] /= tot


@njit
def _forward_from(params, dims, acts, w_off, b_off, start, h, g):
    """Finish a forward pass whose layer ``start`` input is already in ``h``."""
    n_out = dims[start]
    for layer in range(start, dims.shape[0] - 1):
        n_in = dims[layer]
        n_out = dims[layer + 1]
        wo = w_off[layer]
        bo = b_off[layer]
        for o in range(n_out):
            s = params[bo + o]
            row = wo + o * n_in
            for i in range(n_in):
                s += params[row + i] * h[i]
            g[o] = s
        _activate(g, n_out, acts[layer])
        for o in range(n_out):
            h[o] = g[o]
    return n_out


@njit
def _enumerate_layer_nb(params, coord_idx, deltas, levels, level_probs, dims, acts, w_off,
                        b_off, x, layer):
    """Exact expectation when every smoothed coordinate is a weight of ``layer``.

    The mask coordinates of different units are independent, so each unit's
    activated outputs are enumerated on their own (merging equal values,
    e.g. every negative pre-activation under ReLU) and only the joint
    combinations of distinct unit outputs run through the later layers.
    """
    width = dims.max()
    h = np.empty(width)
    g = np.empty(width)
    n_cls = dims[-1]
    n_lv = levels.shape[0]
    # input to ``layer`` does not depend on the smoothed coordinates
    for i in range(dims[0]):
        h[i] = x[i]
    if layer > 0:
        # run the untouched prefix once
        tmp_dims = dims[:layer + 1]
        _forward_from(params, tmp_dims, acts, w_off, b_off, 0, h, g)
    n_in = dims[layer]
    n_units = dims[layer + 1]
    h_in = h[:n_in].copy()
    wo = w_off[layer]
    bo = b_off[layer]
    act = acts[layer]
    # coordinates owned by each unit
    unit_of = (coord_idx - wo) // n_in
    col_of = (coord_idx - wo) % n_in
    n_coord = coord_idx.shape[0]
    max_per_unit = 0
    for o in range(n_units):
        c = 0
        for j in range(n_coord):
            if unit_of[j] == o:
                c += 1
        if c > max_per_unit:
            max_per_unit = c
    max_atoms = 1
    for _ in range(max_per_unit):
        max_atoms *= n_lv
    vals = np.empty((n_units, max_atoms))
    probs = np.empty((n_units, max_atoms))
    counts = np.empty(n_units, dtype=np.int64)
    digits = np.zeros(max_per_unit, dtype=np.int64)
    mine = np.empty(max_per_unit, dtype=np.int64)
    pick = np.zeros(n_units, dtype=np.int64)
    n_next = dims[layer + 2]
    w_next = w_off[layer + 1]
    act_next = acts[layer + 1]
    last = layer + 2 == dims.shape[0] - 1
    contrib = np.empty((n_units, max_atoms, n_next))
    partial = np.empty((n_units + 1, n_next))
    for q in range(n_next):
        partial[0, q] = params[b_off[layer + 1] + q]
    pprob = np.empty(n_units + 1)
    pprob[0] = 1.0
    out = np.zeros((deltas.shape[0], n_cls))
    for d in range(deltas.shape[0]):
        for o in range(n_units):
            base = params[bo + o]
            row = wo + o * n_in
            k = 0
            for j in range(n_coord):
                if unit_of[j] == o:
                    mine[k] = j
                    k += 1
            for i in range(n_in):
                owned = False
                for t in range(k):
                    if col_of[mine[t]] == i:
                        owned = True
                if not owned:
                    base += params[row + i] * h_in[i]
            n_here = 1
            for t in range(k):
                n_here *= n_lv
            counts[o] = 0
            for t in range(k):
                digits[t] = 0
            for a in range(n_here):
                z = base
                p = 1.0
                for t in range(k):
                    j = mine[t]
                    z += params[coord_idx[j]] * deltas[d, j] * levels[digits[t]] * h_in[col_of[j]]
                    p *= level_probs[digits[t]]
                if act == 1 and z < 0.0:
                    z = 0.0
                found = -1
                for u in range(counts[o]):
                    if vals[o, u] == z:
                        found = u
                        break
                if found >= 0:
                    probs[o, found] += p
                else:
                    vals[o, counts[o]] = z
                    probs[o, counts[o]] = p
                    counts[o] += 1
                # odometer, last digit fastest
                t = k - 1
                while t >= 0:
                    digits[t] += 1
                    if digits[t] < n_lv:
                        break
                    digits[t] = 0
                    t -= 1
        # the next layer is linear in the unit outputs: accumulate its
        # pre-activation along the odometer, one partial sum per depth
        for o in range(n_units):
            for u in range(counts[o]):
                for q in range(n_next):
                    contrib[o, u, q] = params[w_next + q * n_units + o] * vals[o, u]
        for o in range(n_units):
            pick[o] = 0
        changed = 0
        while True:
            for o in range(changed, n_units):
                u = pick[o]
                for q in range(n_next):
                    partial[o + 1, q] = partial[o, q] + contrib[o, u, q]
                pprob[o + 1] = pprob[o] * probs[o, u]
            for q in range(n_next):
                h[q] = partial[n_units, q]
            _activate(h, n_next, act_next)
            if not last:
                _forward_from(params, dims, acts, w_off, b_off, layer + 2, h, g)
            p = pprob[n_units]
            for c in range(n_cls):
                out[d, c] += p * h[c]
            o = n_units - 1
            while o >= 0:
                pick[o] += 1
                if pick[o] < counts[o]:
                    break
                pick[o] = 0
                o -= 1
            if o < 0:
                break
            changed = o
    return out


def _enumerate_np(params, coord_idx, deltas, atoms, atom_probs, dims, acts, w_off, b_off, x):
    n_atoms = atoms.shape[0]
    out = np.empty((deltas.shape[0], dims[-1]))
    # keep each batch around a few million doubles
    chunk = max(1, int(4_000_000 // max(1, n_atoms * params.shape[0])))
    base = params[coord_idx]
    for lo in range(0, deltas.shape[0], chunk):
        block = deltas[lo:lo + chunk]
        batch = np.repeat(params[None, :], block.shape[0] * n_atoms, axis=0)
        scaled = (block[:, None, :] * atoms[None, :, :]) * base
        batch[:, coord_idx] = scaled.reshape(-1, coord_idx.shape[0])
        probs = _forward_batch_np(batch, dims, acts, w_off, b_off, x)
        probs = probs.reshape(block.shape[0], n_atoms, -1)
        out[lo:lo + block.shape[0]] = np.einsum("a,dac->dc", atom_probs, probs)
    return out


def _single_layer(coord_idx, dims, acts, w_off):
    """Layer holding every coordinate, if there is one and it is not the output layer."""
    if coord_idx.size == 0:
        return -1
    ends = w_off + dims[:-1] * dims[1:]
    layer = int(np.searchsorted(w_off, coord_idx[0], side="right") - 1)
    if layer < 0 or layer >= len(dims) - 2 or acts[layer] == 2:
        return -1
    if np.all((coord_idx >= w_off[layer]) & (coord_idx < ends[layer])):
        return layer
    return -1


def enumerate_smoothed(params, coord_idx, deltas, atoms, atom_probs, layout, x, use_numba=None,
                       levels=None, level_probs=None):
    """Exact smoothed output for each row of ``deltas``.

    Row ``d`` of the result is ``sum_a atom_probs[a] * f(theta_d,a)`` where
    ``theta_d,a`` equals ``params`` except at ``coord_idx``, which hold
    ``params[coord_idx] * deltas[d] * atoms[a]``.

    When ``atoms`` is the full product of per-coordinate ``levels`` (with
    probabilities ``level_probs``) and every coordinate is a weight of one
    hidden layer, passing ``levels`` lets the numba path factor the sum
    over that layer's units.
    """
    dims, acts, w_off, b_off = layout
    params = np.ascontiguousarray(params, dtype=np.float64)
    coord_idx = np.ascontiguousarray(coord_idx, dtype=np.int64)
    deltas = np.ascontiguousarray(np.atleast_2d(deltas), dtype=np.float64)
    atoms = np.ascontiguousarray(atoms, dtype=np.float64)
    atom_probs = np.ascontiguousarray(atom_probs, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _pick(use_numba):
        layer = _single_layer(coord_idx, dims, acts, w_off) if levels is not None else -1
        if layer >= 0 and len(np.unique(coord_idx)) == coord_idx.size:
            return _enumerate_layer_nb(params, coord_idx, deltas,
                                       np.ascontiguousarray(levels, dtype=np.float64),
                                       np.ascontiguousarray(level_probs, dtype=np.float64),
                                       dims, acts, w_off, b_off, x, layer)
        return _enumerate_nb(params, coord_idx, deltas, atoms, atom_probs,
                             dims, acts, w_off, b_off, x)
    return _enumerate_np(params, coord_idx, deltas, atoms, atom_probs,
                         dims, acts, w_off, b_off, x)
