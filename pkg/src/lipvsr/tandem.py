"""Tandem observations: floored log-posteriors with delta and acceleration.

Columns are laid out ``[log p | delta | delta-delta]``.  Multi-view fusion
concatenates log-posteriors in a fixed view order and then runs one
delta/acceleration pass, which by linearity equals per-view deltas
concatenated.
"""

from __future__ import annotations

import numpy as np

from .dataio import VIEWS

DEFAULT_FLOOR = 1e-8
DEFAULT_WINDOW = 2


def log_features(posteriors, floor=DEFAULT_FLOOR):
    p = np.asarray(posteriors, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("negative posterior")
    return np.log(np.maximum(p, floor))


def delta(seq, window=DEFAULT_WINDOW):
    """Regression deltas over +-``window`` frames with edge replication.

    ``d_t = sum_k k (c[t+k] - c[t-k]) / (2 sum_k k^2)``.
    """
    c = np.asarray(seq, dtype=np.float64)
    squeeze = c.ndim == 1
    if squeeze:
        c = c[:, None]
    T = c.shape[0]
    if T < 1:
        raise ValueError("empty sequence")
    padded = np.concatenate([np.repeat(c[:1], window, axis=0), c,
                             np.repeat(c[-1:], window, axis=0)])
    num = np.zeros_like(c)
    for k in range(1, window + 1):
        num += k * (padded[window + k:window + k + T] - padded[window - k:window - k + T])
    out = num / (2.0 * sum(k * k for k in range(1, window + 1)))
    return out[:, 0] if squeeze else out


def append_deltas(static, window=DEFAULT_WINDOW):
    d1 = delta(static, window)
    return np.hstack([static, d1, delta(d1, window)])


def assemble(posteriors, floor=DEFAULT_FLOOR, window=DEFAULT_WINDOW):
    """Posteriors (T, C) -> tandem observations (T, 3C)."""
    return append_deltas(log_features(posteriors, floor), window)


def order_views(views):
    """Sort view angles into the canonical 0, 30, 45, 60, 90 order."""
    vs = [int(v) for v in views]
    unknown = [v for v in vs if v not in VIEWS]
    if unknown:
        raise ValueError(f"unknown views {unknown}")
    if len(set(vs)) != len(vs):
        raise ValueError(f"duplicate views in {vs}")
    return sorted(vs, key=VIEWS.index)


def concat_views(posteriors_by_view, floor=DEFAULT_FLOOR, window=DEFAULT_WINDOW):
    """Fuse per-view posteriors of one utterance into a (T, 3*C*V) tandem sequence.

    ``posteriors_by_view`` maps view angle -> (T, C) posteriors.
    """
    views = order_views(posteriors_by_view)
    lengths = {v: np.shape(posteriors_by_view[v])[0] for v in views}
    if len(set(lengths.values())) != 1:
        detail = ", ".join(f"view {v}: {n} frames" for v, n in lengths.items())
        raise ValueError(f"frame count mismatch across views ({detail})")
    logs = [log_features(posteriors_by_view[v], floor) for v in views]
    return append_deltas(np.hstack(logs), window)
