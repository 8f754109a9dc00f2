"""Deterministic signal primitives for 100 ms motion traces.

Signals are plain 1D float64 numpy arrays sampled every ``DT`` seconds.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import CoverageGap, DegenerateSignal, InvalidParameter, InvalidSignal, MissingChannel

DT = 0.1
STD_FLOOR = 1e-12


def as_signal(s):
    x = np.asarray(s, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidSignal("motion signal must be a non-empty 1D sequence")
    if not np.all(np.isfinite(x)):
        raise InvalidSignal("motion signal contains non-finite samples")
    return x


def zero_mean(s):
    x = as_signal(s)
    return x - x.mean()


def moving_average(s, k):
    """Centered moving average; edge samples average only the in-range neighbours."""
    x = as_signal(s)
    if k < 1 or k % 2 == 0:
        raise InvalidParameter(f"smoothing width must be a positive odd count, got {k}")
    if k > x.size:
        raise InvalidParameter(f"smoothing width {k} exceeds signal length {x.size}")
    if k == 1:
        return x.copy()
    half = k // 2
    csum = np.concatenate(([0.0], np.cumsum(x)))
    idx = np.arange(x.size)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, x.size)
    return (csum[hi] - csum[lo]) / (hi - lo)


def z_normalize(s):
    x = as_signal(s)
    sd = x.std()
    if sd <= STD_FLOOR:
        raise DegenerateSignal("cannot z-normalize a (near-)constant signal")
    return (x - x.mean()) / sd


@dataclass
class WindowSet:
    windows: np.ndarray  # (n_windows, window_len)
    window_len: int
    stride: int
    source_len: int
    offsets: np.ndarray

    def __len__(self):
        return len(self.offsets)


def window_offsets(source_len, window_len, stride, tail_policy="drop"):
    if window_len <= 0 or stride <= 0:
        raise InvalidParameter("window_len and stride must be positive")
    if window_len > source_len:
        raise InvalidParameter(f"window_len {window_len} exceeds signal length {source_len}")
    if tail_policy not in ("drop", "align_end"):
        raise InvalidParameter(f"unknown tail_policy {tail_policy!r}")
    offsets = list(range(0, source_len - window_len + 1, stride))
    if tail_policy == "align_end" and offsets[-1] + window_len < source_len:
        offsets.append(source_len - window_len)
    return np.asarray(offsets, dtype=np.int64)


def window_signal(s, window_len, stride=None, tail_policy="drop"):
    x = as_signal(s)
    stride = window_len if stride is None else stride
    offsets = window_offsets(x.size, window_len, stride, tail_policy)
    windows = np.stack([x[o:o + window_len] for o in offsets])
    return WindowSet(windows, window_len, stride, x.size, offsets)


def stitch_windows(w):
    """Reassemble a full-length trace, averaging wherever windows overlap."""
    total = np.zeros(w.source_len)
    count = np.zeros(w.source_len, dtype=np.int64)
    for off, win in zip(w.offsets, w.windows):
        total[off:off + w.window_len] += win
        count[off:off + w.window_len] += 1
    gaps = np.flatnonzero(count == 0)
    if gaps.size:
        raise CoverageGap(int(gaps[0]))
    if np.all(count == 1):
        return total
    return total / count


def _square_side(n):
    side = math.isqrt(n)
    if side * side != n:
        raise InvalidParameter(f"window length {n} is not a perfect square")
    return side


def reshape_1d_to_2d(window):
    x = np.asarray(window, dtype=np.float64)
    side = _square_side(x.shape[-1])
    return x.reshape(x.shape[:-1] + (side, side))


def reshape_2d_to_1d(grid):
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim < 2 or g.shape[-1] != g.shape[-2]:
        raise InvalidParameter(f"expected square grid(s), got shape {g.shape}")
    return g.reshape(g.shape[:-2] + (g.shape[-1] * g.shape[-2],))


def pearson_r(a, b):
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise InvalidParameter(f"pearson_r needs equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InvalidParameter("pearson_r needs at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(np.dot(dx, dx) / x.size)
    sy = math.sqrt(np.dot(dy, dy) / y.size)
    if sx <= STD_FLOOR or sy <= STD_FLOOR:
        raise DegenerateSignal("pearson_r of a (near-)constant vector is undefined")
    r = np.dot(dx, dy) / (x.size * sx * sy)
    return float(min(1.0, max(-1.0, r)))


def safe_pearson_r(a, b):
    """Like :func:`pearson_r` but returns NaN ("undefined") for degenerate inputs."""
    try:
        return pearson_r(a, b)
    except DegenerateSignal:
        return math.nan


def _peak_prominences(x, peaks):
    prom = np.empty(len(peaks))
    for i, p in enumerate(peaks):
        higher_left = np.flatnonzero(x[:p] > x[p])
        lo = higher_left[-1] + 1 if higher_left.size else 0
        higher_right = np.flatnonzero(x[p + 1:] > x[p])
        hi = p + 1 + higher_right[0] if higher_right.size else x.size
        base = max(x[lo:p + 1].min(), x[p:hi].min())
        prom[i] = x[p] - base
    return prom


def find_breath_peaks(s, min_distance_s=2.0, prominence_frac=0.2, dt=DT):
    """Indices of breathing peaks (see :func:`count_breathing_cycles`)."""
    x = as_signal(s)
    if x.size < 3:
        raise InvalidSignal("breathing-cycle counting needs at least 3 samples")
    # Collapse runs of equal samples so a flat top counts once, at its middle.
    starts = np.flatnonzero(np.r_[True, x[1:] != x[:-1]])
    ends = np.r_[starts[1:], x.size] - 1
    v = x[starts]
    inner = np.flatnonzero((v[1:-1] > v[:-2]) & (v[1:-1] > v[2:])) + 1
    peaks = (starts[inner] + ends[inner]) // 2
    if peaks.size == 0:
        return peaks

    min_dist = int(round(min_distance_s / dt))
    if min_dist > 1 and peaks.size > 1:
        # Greedy by height: highest first, leftmost among equal heights.
        order = np.lexsort((peaks, -x[peaks]))
        keep = np.ones(peaks.size, dtype=bool)
        for j in order:
            if not keep[j]:
                continue
            p = peaks[j]
            k = j - 1
            while k >= 0 and p - peaks[k] < min_dist:
                keep[k] = False
                k -= 1
            k = j + 1
            while k < peaks.size and peaks[k] - p < min_dist:
                keep[k] = False
                k += 1
        peaks = peaks[keep]

    threshold = prominence_frac * x.std()
    return peaks[_peak_prominences(x, peaks) >= threshold]


def count_breathing_cycles(s, min_distance_s=2.0, prominence_frac=0.2, dt=DT):
    """Number of breathing peaks in ``s``.

    A peak is a sample, or the middle of a flat run of samples, strictly above
    its neighbours on both sides. Peaks closer than ``min_distance_s`` are
    thinned greedily, keeping the taller one (leftmost on ties). Survivors must have topographic prominence of at least
    ``prominence_frac`` times the population standard deviation of ``s``.
    """
    return int(find_breath_peaks(s, min_distance_s, prominence_frac, dt).size)


def quarter_bounds(n):
    if n % 4:
        raise InvalidParameter(f"signal length {n} is not divisible by 4")
    q = n // 4
    return [(i * q, (i + 1) * q) for i in range(4)]


def quarter_scores(com, emt):
    """Pearson R per contiguous quarter; degenerate quarters come back as NaN."""
    c = as_signal(com)
    e = as_signal(emt)
    if c.shape != e.shape:
        raise InvalidParameter(f"length mismatch {c.size} vs {e.size}")
    return np.array([safe_pearson_r(c[lo:hi], e[lo:hi]) for lo, hi in quarter_bounds(c.size)])


def head_quarter_scores(rec):
    """2x4 array of quarter scores for head 1 (row 0) and head 2 (row 1)."""
    h1 = getattr(rec, "com_head1", None)
    h2 = getattr(rec, "com_head2", None)
    if h1 is None or h2 is None:
        raise MissingChannel("record lacks per-head COM signals")
    return np.vstack([quarter_scores(h1, rec.emt), quarter_scores(h2, rec.emt)])
