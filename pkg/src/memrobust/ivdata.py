"""Multi-cycle I-V sweep files and conductance extraction.

File format: UTF-8 CSV with header ``voltage,current,cycle``; volts,
amperes and an integer cycle id per row.  Rows are grouped by cycle id in
order of first appearance.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlignmentError,
    DomainError,
    EmptyInputError,
    FormatError,
    InputError,
    ParseError,
)
from .fileio import atomic_write_text

HEADER = ("voltage", "current", "cycle")


@dataclass
class IVTrace:
    """Raw sweep data for one device.

    ``cycles`` is a list of ``(n_samples, 2)`` arrays holding voltage and
    current columns.
    """
    device_id: str
    cycles: list
    compliance_current: float | None = None
    cycle_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.cycles = [np.asarray(c, dtype=np.float64).reshape(-1, 2) for c in self.cycles]
        if not self.cycles:
            raise EmptyInputError("trace has no cycles")
        if not self.cycle_ids:
            self.cycle_ids = list(range(len(self.cycles)))
        counts = [len(c) for c in self.cycles]
        for cid, n in zip(self.cycle_ids, counts):
            if n < 2:
                raise AlignmentError(f"cycle {cid} has {n} sample(s); need at least 2")
        for cid, n in zip(self.cycle_ids[1:], counts[1:]):
            if n != counts[0]:
                raise AlignmentError(
                    f"cycle {cid} has {n} samples but cycle {self.cycle_ids[0]} has {counts[0]}"
                )

    @property
    def n_cycles(self):
        return len(self.cycles)

    @property
    def n_samples(self):
        return len(self.cycles[0])

    def __eq__(self, other):
        if not isinstance(other, IVTrace):
            return NotImplemented
        return (self.cycle_ids == other.cycle_ids
                and len(self.cycles) == len(other.cycles)
                and all(np.array_equal(a, b) for a, b in zip(self.cycles, other.cycles)))


@dataclass
class ConductanceSet:
    positive_quadrant_index: np.ndarray
    per_cycle: np.ndarray
    mean_smoothed: np.ndarray

    @property
    def n_cycles(self):
        return self.per_cycle.shape[0]

    @property
    def n_points(self):
        return self.per_cycle.shape[1]


def _parse_float(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric {column} value {text!r}", row=row) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite {column} value {text!r}", row=row)
    return value


def parse_iv_text(text, device_id="device"):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyInputError("empty file") from None
    if tuple(h.strip().lower() for h in header) != HEADER:
        raise FormatError(f"expected header 'voltage,current,cycle', got {','.join(header)!r}")
    groups = {}
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 columns, got {len(row)}", row=row_no)
        v = _parse_float(row[0], row_no, "voltage")
        i = _parse_float(row[1], row_no, "current")
        try:
            cid = int(row[2])
        except ValueError:
            raise ParseError(f"non-integer cycle id {row[2]!r}", row=row_no) from None
        if cid < 0:
            raise ParseError(f"negative cycle id {cid}", row=row_no)
        groups.setdefault(cid, []).append((v, i))
    if not groups:
        raise EmptyInputError("file has a header but no data rows")
    ids = list(groups)
    return IVTrace(device_id=device_id, cycles=[groups[c] for c in ids], cycle_ids=ids)


def parse_iv_file(path):
    """Read a ``voltage,current,cycle`` CSV into an :class:`IVTrace`."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    name = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return parse_iv_text(text, device_id=name)


def format_iv(trace):
    lines = [",".join(HEADER)]
    for cid, cyc in zip(trace.cycle_ids, trace.cycles):
        for v, i in cyc:
            lines.append(f"{float(v)!r},{float(i)!r},{cid}")
    return "\n".join(lines) + "\n"


def write_iv_file(trace, path):
    atomic_write_text(path, format_iv(trace))


def ascending_branch(voltage):
    """Indices of the first strictly increasing run of positive voltages."""
    voltage = np.asarray(voltage, dtype=np.float64)
    pos = np.flatnonzero(voltage > 0)
    if pos.size == 0:
        raise DomainError("sweep has no positive-voltage samples")
    start = int(pos[0])
    end = start + 1
    while end < voltage.size and voltage[end] > 0 and voltage[end] > voltage[end - 1]:
        end += 1
    return np.arange(start, end)


def extract_conductance(trace, window=5):
    """Conductance ``G = I / V`` on each cycle's ascending positive branch.

    The smoothing window shrinks to the largest odd value that fits when the
    branch is shorter than ``window``.
    """
    branches = [ascending_branch(c[:, 0]) for c in trace.cycles]
    lengths = {len(b) for b in branches}
    if len(lengths) != 1:
        raise AlignmentError(
            "ascending branches differ in length across cycles: "
            + ", ".join(f"cycle {cid}: {len(b)}" for cid, b in zip(trace.cycle_ids, branches))
        )
    if len(branches[0]) < 2:
        raise DomainError("ascending positive branch has fewer than 2 samples")
    per_cycle = np.stack([c[b, 1] / c[b, 0] for c, b in zip(trace.cycles, branches)])
    if not np.all(np.isfinite(per_cycle)) or np.any(per_cycle <= 0):
        raise DomainError("conductance must be finite and positive on the ascending branch")
    index = branches[0]
    window = min(window, per_cycle.shape[1] - (1 - per_cycle.shape[1] % 2))
    cond = ConductanceSet(index, per_cycle, per_cycle.mean(axis=0))
    cond.mean_smoothed = smooth_mean_curve(cond, window)
    return cond


def moving_average(values, window):
    """Centered moving average, window truncated at both ends."""
    if window < 1 or window % 2 == 0 or int(window) != window:
        raise InputError(f"window must be an odd positive integer, got {window}")
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if window > n:
        raise InputError(f"window {window} exceeds curve length {n}")
    half = window // 2
    total = np.zeros(n)
    count = np.zeros(n)
    for k in range(-half, half + 1):
        lo, hi = max(0, -k), min(n, n - k)
        total[lo:hi] += values[lo + k:hi + k]
        count[lo:hi] += 1
    return total / count


def smooth_mean_curve(cond, window=5):
    """Moving average of the per-point cross-cycle mean."""
    return moving_average(cond.per_cycle.mean(axis=0), window)
