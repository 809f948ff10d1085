"""EMG-gated gaze fixation detection.

Movement onsets are found by thresholding the z-score (Bollinger band) of the
channel-averaged sliding-window EMG RMS against its own trailing statistics;
inside onset regions, a fixation fires when the gaze volatility (mean
Euclidean distance of a trailing gaze window from its centroid) drops below
an adaptive threshold, refreshed periodically as a percentile of recent
volatility history.

Two entry points share bit-identical arithmetic: :func:`detect_fixations`
(vectorized batch) and :class:`OnlineFixationDetector` (one sample at a
time), so streaming deployments can be validated against offline runs.
Prefix sums, not per-window reductions, define the rolling statistics in
both paths; the gaze-volatility window is evaluated by one shared kernel.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from numba import njit, prange


@dataclass(frozen=True)
class DetectorParams:
    """Detector constants; defaults follow the standard configuration."""

    tau_rms: float = 0.300            # EMG RMS window, seconds
    tau_boll: float = 0.300           # Bollinger window, seconds
    tau_gaze: float = 0.300           # gaze volatility window, seconds
    eta: float = 2.0                  # onset sensitivity, in standard deviations
    percentile: float = 0.40          # adaptive volatility threshold quantile
    threshold_update_period: float = 0.5   # seconds between threshold refreshes
    volatility_history: float = 10.0  # seconds of volatility kept for the quantile
    sigma_floor: float = 1e-9         # volts; keeps the z-score finite in silence

    def __post_init__(self):
        for name in (
            "tau_rms", "tau_boll", "tau_gaze", "eta",
            "threshold_update_period", "volatility_history", "sigma_floor",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.percentile < 1.0:
            raise ValueError("percentile must be in (0, 1)")


@dataclass(frozen=True)
class OnsetInterval:
    """Half-open sample range [start, end) where the EMG z-score exceeds eta."""

    start: int
    end: int

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError("empty onset interval")


@dataclass(frozen=True)
class FixationEvent:
    time: int                 # sample index of the threshold crossing
    centroid: np.ndarray      # [2] gaze window centroid, pixels
    volatility: float         # pixels

    def __post_init__(self):
        if self.volatility < 0:
            raise ValueError("volatility must be nonnegative")


def _window_samples(tau, rate):
    w = int(round(tau * rate))
    if w < 1:
        raise ValueError(f"window {tau} s too short at {rate} Hz")
    return w


def avg_rms(emg, t, tau_rms, rate):
    """Mean over channels of the per-channel RMS of the trailing window
    ending at (and including) sample t."""
    emg = np.asarray(emg, dtype=np.float64)
    w = _window_samples(tau_rms, rate)
    if t < w - 1 or t >= emg.shape[0]:
        raise ValueError(f"no full {w}-sample window ending at t={t}")
    win = emg[t - w + 1: t + 1]
    return float(np.mean(np.sqrt(np.mean(win * win, axis=0))))


def bollinger(series, t, tau_boll, rate, sigma_floor=1e-9):
    """z-score of series[t] against the mean/std of the window strictly
    before t; population standard deviation, floored at ``sigma_floor``."""
    series = np.asarray(series, dtype=np.float64)
    w = _window_samples(tau_boll, rate)
    if t < w or t >= series.shape[0]:
        raise ValueError(f"no {w}-sample history strictly before t={t}")
    win = series[t - w: t]
    sigma = float(np.std(win))
    return float((series[t] - win.mean()) / max(sigma, sigma_floor))


@njit(cache=True)
def _vol_window(gx, gy, ok, t, w):  # pragma: no cover - shared kernel
    """Volatility and centroid of the gaze window [t-w+1, t]; NaNs if any
    sample in the window is invalid."""
    sx = 0.0
    sy = 0.0
    for j in range(t - w + 1, t + 1):
        if not ok[j]:
            return np.nan, np.nan, np.nan
        sx += gx[j]
        sy += gy[j]
    cx = sx / w
    cy = sy / w
    s = 0.0
    for j in range(t - w + 1, t + 1):
        dx = gx[j] - cx
        dy = gy[j] - cy
        s += np.sqrt(dx * dx + dy * dy)
    return s / w, cx, cy


@njit(parallel=True, cache=True)
def _vol_series(gx, gy, ok, w):  # pragma: no cover
    T = gx.shape[0]
    out = np.full(T, np.nan)
    for t in prange(w - 1, T):
        v, _, _ = _vol_window(gx, gy, ok, t, w)
        out[t] = v
    return out


def gaze_volatility(gaze, t, tau_gaze, rate, valid=None):
    """Mean Euclidean distance of the trailing gaze window from its centroid.

    Returns NaN when any sample in the window is invalid or non-finite
    (callers exclude such samples from thresholds and events).
    """
    gaze = np.asarray(gaze, dtype=np.float64)
    w = _window_samples(tau_gaze, rate)
    if t < w - 1 or t >= gaze.shape[0]:
        raise ValueError(f"no full {w}-sample window ending at t={t}")
    ok = np.isfinite(gaze).all(axis=1)
    if valid is not None:
        ok = ok & np.asarray(valid, dtype=bool)
    v, _, _ = _vol_window(
        np.ascontiguousarray(gaze[:, 0]), np.ascontiguousarray(gaze[:, 1]),
        ok, int(t), w,
    )
    return float(v)


def _avg_rms_series(emg, w):
    """RMS-mean series by prefix sums; value at index i is the window ending
    at absolute sample i + w - 1."""
    sq = np.empty((emg.shape[0] + 1, emg.shape[1]), dtype=np.float64)
    sq[0] = 0.0
    np.cumsum(emg * emg, axis=0, out=sq[1:])
    win = (sq[w:] - sq[:-w]) / w
    return np.sqrt(win).mean(axis=1)


def _bollinger_series(series, w, sigma_floor):
    """z-score series with a strictly-past window; index i of the output is
    aligned with index i of the input, NaN for i < w."""
    T = series.shape[0]
    c1 = np.empty(T + 1)
    c2 = np.empty(T + 1)
    c1[0] = 0.0
    c2[0] = 0.0
    np.cumsum(series, out=c1[1:])
    np.cumsum(series * series, out=c2[1:])
    b = np.full(T, np.nan)
    if T <= w:
        return b
    m = (c1[w:-1] - c1[:-w - 1]) / w
    ex2 = (c2[w:-1] - c2[:-w - 1]) / w
    var = ex2 - m * m
    sigma = np.sqrt(np.maximum(var, 0.0))
    b[w:] = (series[w:] - m) / np.maximum(sigma, sigma_floor)
    return b


def detect_onsets(avg_rms_series, params: DetectorParams, rate):
    """Maximal intervals where the Bollinger z-score of the series is >= eta."""
    series = np.asarray(avg_rms_series, dtype=np.float64)
    w = _window_samples(params.tau_boll, rate)
    if series.shape[0] <= w:
        return []
    b = _bollinger_series(series, w, params.sigma_floor)
    mask = np.zeros(series.shape[0], dtype=bool)
    np.greater_equal(b, params.eta, out=mask, where=np.isfinite(b))
    return _mask_to_intervals(mask)


def _mask_to_intervals(mask):
    idx = np.flatnonzero(np.diff(np.concatenate(([False], mask, [False])).astype(np.int8)))
    return [OnsetInterval(int(s), int(e)) for s, e in zip(idx[::2], idx[1::2])]


@njit(cache=True)
def _event_scan(vol, thr, onset):  # pragma: no cover
    """Shared event semantics: one event per below-threshold run per onset
    interval, emitted at the first crossing; invalid-volatility samples are
    skipped without touching the run state."""
    out = np.empty(vol.shape[0], dtype=np.int64)
    n = 0
    below = False
    prev_onset = False
    for t in range(vol.shape[0]):
        if onset[t]:
            if not prev_onset:
                below = False  # new onset interval, new run budget
            v = vol[t]
            th = thr[t]
            if not (np.isnan(v) or np.isnan(th)):
                if v < th:
                    if not below:
                        out[n] = t
                        n += 1
                    below = True
                else:
                    below = False
        prev_onset = onset[t]
    return out[:n].copy()


def _thresholds(vol, params: DetectorParams, rate):
    """Piecewise-constant threshold series: at every update tick, the
    configured percentile of the finite volatility values in the trailing
    history window (inclusive of the tick sample)."""
    T = vol.shape[0]
    period = max(1, int(round(params.threshold_update_period * rate)))
    hist = int(round(params.volatility_history * rate))
    thr = np.full(T, np.nan)
    cur = np.nan
    for tick in range(0, T, period):
        vals = vol[max(0, tick - hist + 1): tick + 1]
        vals = vals[np.isfinite(vals)]
        if vals.size:
            cur = float(np.percentile(vals, params.percentile * 100.0))
        thr[tick: tick + period] = cur
    return thr


def detect_fixations(rec, params: DetectorParams = DetectorParams()):
    """Batch fixation detection over a synced recording.

    Returns the list of :class:`FixationEvent` in time order.  The scan
    keeps a volatility-percentile threshold that refreshes every
    ``threshold_update_period`` seconds from the trailing
    ``volatility_history`` seconds, and emits events only inside EMG onset
    intervals, once per below-threshold run.
    """
    rate = rec.rate
    w_rms = _window_samples(params.tau_rms, rate)
    w_boll = _window_samples(params.tau_boll, rate)
    w_gaze = _window_samples(params.tau_gaze, rate)
    T = rec.emg.shape[0]
    if T < w_rms + w_boll + 1 or T < w_gaze:
        raise ValueError("recording shorter than the detector windows")

    r = _avg_rms_series(np.ascontiguousarray(rec.emg, dtype=np.float64), w_rms)
    onset = np.zeros(T, dtype=bool)
    for iv in detect_onsets(r, params, rate):
        onset[iv.start + w_rms - 1: iv.end + w_rms - 1] = True

    gx = np.ascontiguousarray(rec.gaze[:, 0], dtype=np.float64)
    gy = np.ascontiguousarray(rec.gaze[:, 1], dtype=np.float64)
    ok = np.asarray(rec.gaze_valid, dtype=bool) & np.isfinite(rec.gaze).all(axis=1)
    vol = _vol_series(gx, gy, ok, w_gaze)
    thr = _thresholds(vol, params, rate)

    events = []
    for t in _event_scan(vol, thr, onset):
        v, cx, cy = _vol_window(gx, gy, ok, int(t), w_gaze)
        events.append(
            FixationEvent(time=int(t), centroid=np.array([cx, cy]), volatility=float(v))
        )
    return events


class OnlineFixationDetector:
    """Streaming twin of :func:`detect_fixations`.

    Feed one sample per call to :meth:`push`; events come back as they are
    detected and are also accumulated on :attr:`events`.  A detector instance
    is a single-owner state machine: it cannot be shared mid-stream, but
    distinct recordings can be processed on separate instances in parallel.
    """

    def __init__(self, params: DetectorParams, rate, n_channels):
        self.params = params
        self.rate = rate
        self.n_channels = n_channels
        self.w_rms = _window_samples(params.tau_rms, rate)
        self.w_boll = _window_samples(params.tau_boll, rate)
        self.w_gaze = _window_samples(params.tau_gaze, rate)
        self._period = max(1, int(round(params.threshold_update_period * rate)))
        self._hist = int(round(params.volatility_history * rate))

        self._t = 0
        self._sq_prefix = [np.zeros(n_channels)]
        self._r_vals = []            # avg-rms series (defined tail)
        self._r_c1 = [0.0]           # its prefix sums
        self._r_c2 = [0.0]
        cap = 4096
        self._gx = np.empty(cap)
        self._gy = np.empty(cap)
        self._ok = np.zeros(cap, dtype=bool)
        self._vol_hist_t = deque()   # times of finite volatility values
        self._vol_hist_v = deque()
        self._thr = np.nan
        self._below = False
        self._prev_onset = False
        self.events = []

    def _grow(self):
        cap = self._gx.shape[0]
        if self._t < cap:
            return
        new = np.empty(cap * 2)
        new[:cap] = self._gx
        self._gx = new
        new = np.empty(cap * 2)
        new[:cap] = self._gy
        self._gy = new
        newb = np.zeros(cap * 2, dtype=bool)
        newb[:cap] = self._ok
        self._ok = newb

    def push(self, emg_row, gaze_xy, valid=True):
        t = self._t
        self._grow()
        emg_row = np.asarray(emg_row, dtype=np.float64)
        x, y = float(gaze_xy[0]), float(gaze_xy[1])
        self._gx[t] = x
        self._gy[t] = y
        self._ok[t] = bool(valid) and np.isfinite(x) and np.isfinite(y)

        # rolling EMG statistics via the same prefix-sum arithmetic as batch
        self._sq_prefix.append(self._sq_prefix[-1] + emg_row * emg_row)
        in_onset = False
        if t >= self.w_rms - 1:
            win = (self._sq_prefix[t + 1] - self._sq_prefix[t + 1 - self.w_rms]) / self.w_rms
            r_t = np.sqrt(win).mean()
            self._r_vals.append(r_t)
            self._r_c1.append(self._r_c1[-1] + r_t)
            self._r_c2.append(self._r_c2[-1] + r_t * r_t)
            i = len(self._r_vals) - 1
            if i >= self.w_boll:
                w = self.w_boll
                m = (self._r_c1[i] - self._r_c1[i - w]) / w
                ex2 = (self._r_c2[i] - self._r_c2[i - w]) / w
                var = ex2 - m * m
                sigma = np.sqrt(max(var, 0.0))
                b = (r_t - m) / max(sigma, self.params.sigma_floor)
                in_onset = bool(b >= self.params.eta)

        # gaze volatility through the shared window kernel
        v = np.nan
        if t >= self.w_gaze - 1:
            v, _, _ = _vol_window(self._gx, self._gy, self._ok, t, self.w_gaze)
        if np.isfinite(v):
            self._vol_hist_t.append(t)
            self._vol_hist_v.append(v)
        lo = t - self._hist
        while self._vol_hist_t and self._vol_hist_t[0] <= lo:
            self._vol_hist_t.popleft()
            self._vol_hist_v.popleft()
        if t % self._period == 0 and self._vol_hist_v:
            self._thr = float(
                np.percentile(np.array(self._vol_hist_v), self.params.percentile * 100.0)
            )

        event = None
        if in_onset:
            if not self._prev_onset:
                self._below = False
            if not (np.isnan(v) or np.isnan(self._thr)):
                if v < self._thr:
                    if not self._below:
                        vv, cx, cy = _vol_window(
                            self._gx, self._gy, self._ok, t, self.w_gaze
                        )
                        event = FixationEvent(
                            time=t, centroid=np.array([cx, cy]), volatility=float(vv)
                        )
                        self.events.append(event)
                    self._below = True
                else:
                    self._below = False
        self._prev_onset = in_onset
        self._t += 1
        return event
