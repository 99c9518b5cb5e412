"""Error statistics over predictions: angle profiles, bins, groups, clusters, phase events.

Every quartile and 75th percentile in this module uses numpy's inclusive
linear interpolation (``method="linear"``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy.signal import find_peaks


class UndefinedCorrelation(ValueError):
    pass


class ContractError(ValueError):
    pass


# angles ----------------------------------------------------------------------


def circular_angle_error(pred_deg, true_deg):
    """Smallest absolute difference between two directions, in ``[0, 180]``."""
    d = np.mod(np.abs(np.asarray(pred_deg, dtype=np.float64) - np.asarray(true_deg, dtype=np.float64)), 360.0)
    out = np.minimum(d, 360.0 - d)
    return float(out) if out.ndim == 0 else out


def line_symmetric_error(pred_deg, true_deg):
    """Orientation error ignoring direction (``theta ~ theta + 180``), in ``[0, 90]``."""
    e = circular_angle_error(pred_deg, true_deg)
    return np.minimum(e, 180.0 - e) if isinstance(e, np.ndarray) else min(e, 180.0 - e)


def percentile(values, q):
    return float(np.percentile(np.asarray(values, dtype=np.float64), q, method="linear"))


# bins ------------------------------------------------------------------------


@dataclass
class BinStat:
    label: str
    lo: float
    hi: float
    n: int
    mean: float | None = None
    median: float | None = None
    q1: float | None = None
    q3: float | None = None
    p75: float | None = None

    @property
    def center(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def as_row(self) -> dict:
        return {"label": self.label, "lo": self.lo, "hi": self.hi, "center": self.center, "n": self.n,
                "mean": self.mean, "median": self.median, "q1": self.q1, "q3": self.q3, "p75": self.p75}


def _describe(label, lo, hi, values) -> BinStat:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return BinStat(label, lo, hi, 0)
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    return BinStat(label, lo, hi, int(v.size), float(v.mean()), float(med), float(q1), float(q3), float(q3))


def angle_bin_profile(true_deg, errors, bin_width_deg: float = 10.0) -> list[BinStat]:
    """Angle error statistics per orientation bin.

    Bins are centred on multiples of the bin width, ``[c - w/2, c + w/2)``,
    so 0, 90, 180 and 270 degrees each sit mid-bin; the 0 bin wraps around.
    """
    n_bins = 360.0 / bin_width_deg
    if abs(n_bins - round(n_bins)) > 1e-9:
        raise ValueError(f"bin width {bin_width_deg} does not divide 360")
    n_bins = int(round(n_bins))
    w = float(bin_width_deg)
    t = np.mod(np.asarray(true_deg, dtype=np.float64) + w / 2, 360.0)
    e = np.asarray(errors, dtype=np.float64)
    idx = np.minimum((t // w).astype(int), n_bins - 1)
    out = []
    for b in range(n_bins):
        c = b * w
        out.append(_describe(f"{c:g}deg", c - w / 2, c + w / 2, e[idx == b]))
    return out


def length_bin_stats(lengths, errors, lo: float = 20.0, hi: float = 100.0, width: float = 8.0,
                     tol: float = 1e-9) -> list[BinStat]:
    """Bins ``[lo, lo+width), ...``; the last bin is closed on the right."""
    n_bins = int(round((hi - lo) / width))
    edges = lo + width * np.arange(n_bins + 1)
    L = np.asarray(lengths, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    if L.size and (L.min() < lo - tol or L.max() > hi + tol):
        raise ValueError(f"lengths outside [{lo}, {hi}]: min {L.min()}, max {L.max()}")
    idx = np.clip(np.searchsorted(edges, L, side="right") - 1, 0, n_bins - 1)
    return [
        _describe(f"{edges[b]:g}-{edges[b + 1]:g}px", float(edges[b]), float(edges[b + 1]), e[idx == b])
        for b in range(n_bins)
    ]


@dataclass
class GroupStat:
    key: Hashable
    n: int
    mean: float
    median: float
    q1: float
    q3: float
    p75: float

    def as_row(self) -> dict:
        return {"group": self.key, "n": self.n, "mean": self.mean, "median": self.median,
                "q1": self.q1, "q3": self.q3, "p75": self.p75}


def group_stats(keys: Sequence[Hashable], errors) -> list[GroupStat]:
    """Descriptive statistics of errors per distinct key, sorted by median then key."""
    e = np.asarray(errors, dtype=np.float64)
    keys = list(keys)
    if len(keys) != e.size:
        raise ContractError("keys and errors differ in length")
    groups: dict[Hashable, list[float]] = {}
    for k, v in zip(keys, e):
        groups.setdefault(k, []).append(v)
    out = []
    for k, vals in groups.items():
        b = _describe(str(k), 0.0, 0.0, vals)
        out.append(GroupStat(k, b.n, b.mean, b.median, b.q1, b.q3, b.p75))
    out.sort(key=lambda g: (g.median, str(g.key)))
    return out


# hexbin ----------------------------------------------------------------------


@dataclass
class HexCell:
    index: tuple[int, int]  # (row, col) in the offset-row lattice
    center: tuple[float, float]
    count: int


@dataclass
class HexbinResult:
    cells: list[HexCell]
    hex_width: float  # data units, flat-to-flat along x
    row_height: float  # data units between row centres
    extent: tuple[float, float, float, float]

    def as_rows(self) -> list[dict]:
        return [{"row": c.index[0], "col": c.index[1], "cx": c.center[0], "cy": c.center[1], "count": c.count}
                for c in self.cells]


_H = math.sqrt(3.0) / 2.0


def hexbin(points, extent: tuple[float, float, float, float], gridsize: int | tuple[int, int] = 20) -> HexbinResult:
    """Count points per pointy-top hexagon.

    In normalised space each hexagon is one unit wide with rows spaced
    ``sqrt(3)/2`` apart and odd rows shifted half a unit. Each point goes to
    its nearest centre; exact ties go to the smaller ``(row, col)`` index.
    """
    xmin, xmax, ymin, ymax = map(float, extent)
    if xmax <= xmin or ymax <= ymin:
        raise ValueError("degenerate extent")
    nx, ny = (gridsize, gridsize) if isinstance(gridsize, int) else gridsize
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    sx = (xmax - xmin) / nx
    sy = (ymax - ymin) / (ny * _H)
    u = (pts[:, 0] - xmin) / sx
    v = (pts[:, 1] - ymin) / sy
    # even rows: centres (i, 2hj); odd rows: (i + 1/2, 2hj + h)
    # nearest lattice index per row family, halves rounding down
    ia, ja = np.ceil(u - 0.5), np.ceil(v / (2 * _H) - 0.5)
    ib, jb = np.ceil(u - 1.0), np.ceil((v - _H) / (2 * _H) - 0.5)
    da = (u - ia) ** 2 + (v - 2 * _H * ja) ** 2
    db = (u - ib - 0.5) ** 2 + (v - 2 * _H * jb - _H) ** 2
    ra, ca = (2 * ja).astype(np.int64), ia.astype(np.int64)
    rb, cb = (2 * jb + 1).astype(np.int64), ib.astype(np.int64)
    tie = np.isclose(da, db, rtol=0.0, atol=1e-12)
    a_smaller = (ra < rb) | ((ra == rb) & (ca < cb))
    use_a = np.where(tie, a_smaller, da < db)
    rows = np.where(use_a, ra, rb)
    cols = np.where(use_a, ca, cb)
    counts: dict[tuple[int, int], int] = {}
    for r, c in zip(rows.tolist(), cols.tolist()):
        counts[(r, c)] = counts.get((r, c), 0) + 1
    cells = []
    for (r, c) in sorted(counts):
        cu = c + (0.5 if r % 2 else 0.0)
        cv = r * _H
        cells.append(HexCell((r, c), (xmin + cu * sx, ymin + cv * sy), counts[(r, c)]))
    return HexbinResult(cells, sx, _H * sy, (xmin, xmax, ymin, ymax))


# clustering ------------------------------------------------------------------


@dataclass
class ClusterAssignment:
    k: int
    assignment: dict[Hashable, int]
    members: list[list[Hashable]]
    centers: list[float]
    wcss: float
    cluster_wcss: list[float] = field(default_factory=list)

    def as_rows(self, values: Mapping[Hashable, float]) -> list[dict]:
        return [{"label": lab, "cluster": cid, "value": values[lab]}
                for cid, mem in enumerate(self.members) for lab in mem]


def kmeans_1d(values: Mapping[Hashable, float] | Sequence[tuple[Hashable, float]], k: int) -> ClusterAssignment:
    """Globally optimal 1-D k-means by dynamic programming over sorted values.

    ``cost[m][i]`` is the least within-cluster sum of squares splitting the
    first ``i`` sorted values into ``m`` contiguous clusters. Ties between
    split points resolve to the smallest split. Cluster ids ascend with their
    centre.
    """
    items = list(values.items()) if isinstance(values, Mapping) else [tuple(t) for t in values]
    n = len(items)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"cannot form {k} clusters from {n} values")
    items.sort(key=lambda t: (float(t[1]), str(t[0])))
    x = np.array([float(v) for _, v in items])
    s1 = np.concatenate([[0.0], np.cumsum(x)])
    s2 = np.concatenate([[0.0], np.cumsum(x * x)])

    def sse(a: int, b: int) -> float:  # values a..b-1
        m = b - a
        tot = s1[b] - s1[a]
        return max(float(s2[b] - s2[a] - tot * tot / m), 0.0)

    cost = np.full((k + 1, n + 1), np.inf)
    arg = np.zeros((k + 1, n + 1), dtype=int)
    cost[0, 0] = 0.0
    for m in range(1, k + 1):
        for i in range(m, n - (k - m) + 1):
            best, best_j = np.inf, m - 1
            for j in range(m - 1, i):
                c = cost[m - 1, j] + sse(j, i)
                if not np.isfinite(best) or c < best - 1e-12 * max(1.0, abs(best)):
                    best, best_j = c, j
            cost[m, i], arg[m, i] = best, best_j
    bounds = []
    i = n
    for m in range(k, 0, -1):
        j = arg[m, i]
        bounds.append((j, i))
        i = j
    bounds.reverse()
    members, centers, per = [], [], []
    assignment = {}
    for cid, (a, b) in enumerate(bounds):
        labs = [items[t][0] for t in range(a, b)]
        members.append(labs)
        centers.append(float(x[a:b].mean()))
        per.append(sse(a, b))
        for lab in labs:
            assignment[lab] = cid
    return ClusterAssignment(k, assignment, members, centers, float(sum(per)), per)


# correlation -----------------------------------------------------------------


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("series differ in length")
    if x.size < 2:
        raise UndefinedCorrelation("need at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("zero variance")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


# phase transitions -----------------------------------------------------------


@dataclass
class PhaseEvent:
    epoch: int
    prominence: float
    height: float
    marker: str = "bump"


def moving_average(series, window: int) -> np.ndarray:
    """Centred mean over ``2 * (window // 2) + 1`` points, truncated at the ends."""
    s = np.asarray(series, dtype=np.float64)
    h = int(window) // 2
    c = np.concatenate([[0.0], np.cumsum(s)])
    i = np.arange(s.size)
    lo, hi = np.maximum(i - h, 0), np.minimum(i + h + 1, s.size)
    return (c[hi] - c[lo]) / (hi - lo)


def detect_phase_transitions(series, smooth_window: int = 5, min_prominence: float | None = None,
                             first_epoch: int = 1) -> list[PhaseEvent]:
    """Bumps in a descending loss curve.

    A bump is a local maximum of the smoothed series after its global maximum
    whose prominence is at least ``min_prominence`` (default: 2% of the raw
    series' range). Epoch numbers start at ``first_epoch``.
    """
    s = np.asarray(series, dtype=np.float64)
    if s.size <= smooth_window:
        raise ValueError(f"series length {s.size} must exceed smooth_window {smooth_window}")
    if min_prominence is None:
        min_prominence = 0.02 * float(s.max() - s.min())
    sm = moving_average(s, smooth_window)
    g = int(np.argmax(sm))
    if min_prominence <= 0:
        min_prominence = np.finfo(float).tiny
    peaks, props = find_peaks(sm, prominence=min_prominence)
    return [
        PhaseEvent(int(p) + first_epoch, float(pr), float(sm[p]))
        for p, pr in zip(peaks, props["prominences"])
        if p > g
    ]


@dataclass
class AlignedJump:
    event_epoch: int
    task: str
    jump_epoch: int
    jump: float
    flagged: bool


@dataclass
class CorrelationDynamics:
    trajectories: dict[str, np.ndarray]
    events: list[PhaseEvent]
    alignments: list[AlignedJump]


def correlation_dynamics(metrics: Sequence[Mapping[str, float]], tasks: Sequence[str], window: int = 3,
                         smooth_window: int = 5, min_prominence: float | None = None,
                         min_jump: float = 0.1) -> CorrelationDynamics:
    """Per-task rho trajectories and their largest one-epoch change near each loss bump.

    ``jump_epoch`` is the epoch at which the changed value is first seen.
    """
    if not metrics:
        raise ContractError("empty metric series")
    for t in tasks:
        if f"rho_{t}" not in metrics[0]:
            raise ContractError(f"metric series lacks column rho_{t}")
    epochs = np.array([int(m["epoch"]) for m in metrics])
    loss = np.array([float(m["train_loss"]) for m in metrics])
    traj = {t: np.array([float(m[f"rho_{t}"]) for m in metrics]) for t in tasks}
    events = detect_phase_transitions(loss, smooth_window, min_prominence, first_epoch=int(epochs[0]))
    aligned = []
    for ev in events:
        for t in tasks:
            d = np.abs(np.diff(traj[t]))
            jump_ep = epochs[1:]
            sel = np.abs(jump_ep - ev.epoch) <= window
            if not sel.any():
                continue
            dd = np.where(sel, np.nan_to_num(d, nan=0.0), -1.0)
            j = int(np.argmax(dd))
            aligned.append(AlignedJump(ev.epoch, t, int(jump_ep[j]), float(d[j]), bool(d[j] >= min_jump)))
    return CorrelationDynamics(traj, events, aligned)
