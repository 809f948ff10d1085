"""Loading, synchronization, filtering and rasterization of raw streams.

Raw EMG, gaze and label files come in as three CSVs; the output is a
:class:`SyncedRecording` on a single sample grid at the EMG rate.  EMG is
resampled by nearest timestamp, gaze is upsampled by zero-order hold of the
last valid sample (fixations are piecewise-constant, interpolation would
invent gaze positions mid-saccade), and label intervals are rasterized with
rest (class 0) everywhere not covered.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import signal


class ParseError(ValueError):
    """Malformed input file (bad header, non-numeric cell, NaN)."""


class DataError(ValueError):
    """Structurally valid input that violates a data invariant."""


@dataclass
class EmgStream:
    timestamps: np.ndarray    # [T_e] seconds, strictly increasing
    samples: np.ndarray       # [T_e, C] volts

    def __post_init__(self):
        if self.timestamps.shape[0] != self.samples.shape[0]:
            raise DataError("EMG timestamps and samples differ in length")
        if self.samples.ndim != 2 or self.samples.shape[1] < 1:
            raise DataError("EMG needs at least one channel")
        if np.any(np.diff(self.timestamps) <= 0):
            raise DataError("EMG timestamps must be strictly increasing")
        if not np.isfinite(self.samples).all():
            raise DataError("EMG samples contain NaN/Inf")


@dataclass
class GazeStream:
    timestamps: np.ndarray    # [T_g] seconds
    points: np.ndarray        # [T_g, 2] pixels
    validity: np.ndarray      # [T_g] bool

    def __post_init__(self):
        n = self.timestamps.shape[0]
        if self.points.shape != (n, 2) or self.validity.shape[0] != n:
            raise DataError("gaze arrays have inconsistent shapes")
        if np.any(np.diff(self.timestamps) <= 0):
            raise DataError("gaze timestamps must be strictly increasing")
        if not np.isfinite(self.points[self.validity]).all():
            raise DataError("valid gaze points must be finite")


@dataclass
class LabelSpan:
    t_start: float
    t_end: float
    label: int
    trial: int
    repetition: int


@dataclass
class SyncedRecording:
    """All modalities on one timeline at ``rate`` Hz."""

    rate: float
    emg: np.ndarray             # [T, C]
    gaze: np.ndarray            # [T, 2]
    gaze_valid: np.ndarray      # [T] bool
    labels: np.ndarray          # [T] class ids, 0 = rest
    trial_ids: np.ndarray       # [T]
    repetition_ids: np.ndarray  # [T]

    def __post_init__(self):
        T = self.emg.shape[0]
        for name in ("gaze", "gaze_valid", "labels", "trial_ids", "repetition_ids"):
            if getattr(self, name).shape[0] != T:
                raise DataError(f"synced array {name} has mismatched length")
        if self.rate <= 0:
            raise DataError("rate must be positive")

    @property
    def duration(self):
        return self.emg.shape[0] / self.rate

    @property
    def n_channels(self):
        return self.emg.shape[1]


def synchronize(emg: EmgStream, gaze: GazeStream, labels, rate) -> SyncedRecording:
    """Resample all modalities onto the intersection of their spans.

    EMG by nearest timestamp; gaze by zero-order hold over valid samples,
    with grid points marked invalid when the held sample is stale (older
    than 1.5 nominal gaze periods) or flagged invalid in the source.
    """
    t0 = max(emg.timestamps[0], gaze.timestamps[0])
    t1 = min(emg.timestamps[-1], gaze.timestamps[-1])
    if t1 <= t0:
        raise DataError("EMG and gaze spans do not overlap")
    # relative epsilon so spans that are an exact number of periods up to
    # float rounding do not lose their last sample
    T = int(np.floor((t1 - t0) * rate * (1.0 + 1e-12))) + 1
    grid = t0 + np.arange(T) / rate

    # EMG: nearest sample
    idx = np.searchsorted(emg.timestamps, grid)
    idx = np.clip(idx, 1, len(emg.timestamps) - 1)
    left = emg.timestamps[idx - 1]
    right = emg.timestamps[idx]
    take_left = (grid - left) <= (right - grid)
    nearest = np.where(take_left, idx - 1, idx)
    emg_out = emg.samples[nearest]

    # gaze: hold the last valid sample
    vt = gaze.timestamps[gaze.validity]
    gaze_out = np.zeros((T, 2))
    valid_out = np.zeros(T, dtype=bool)
    if vt.size:
        period = float(np.median(np.diff(gaze.timestamps))) if len(gaze.timestamps) > 1 else np.inf
        hold_tol = 1.5 * period
        vp = gaze.points[gaze.validity]
        j = np.searchsorted(vt, grid, side="right") - 1
        has_prev = j >= 0
        jj = np.maximum(j, 0)
        gaze_out = vp[jj]
        gaze_out[~has_prev] = 0.0
        valid_out = has_prev & ((grid - vt[jj]) <= hold_tol)

    label_arr, trial_arr, rep_arr = rasterize_labels(labels, grid)
    return SyncedRecording(
        rate=float(rate),
        emg=np.ascontiguousarray(emg_out, dtype=np.float64),
        gaze=np.ascontiguousarray(gaze_out, dtype=np.float64),
        gaze_valid=valid_out,
        labels=label_arr,
        trial_ids=trial_arr,
        repetition_ids=rep_arr,
    )


def rasterize_labels(spans, grid):
    """Paint label intervals [t_start, t_end) onto the sample grid.

    Uncovered samples get label 0 (rest); their trial/repetition ids are
    back-filled from the next covered sample (rest precedes its grasp), or
    forward-filled at the tail.
    """
    T = grid.shape[0]
    labels = np.zeros(T, dtype=np.int64)
    trials = np.full(T, -1, dtype=np.int64)
    reps = np.full(T, -1, dtype=np.int64)
    spans = sorted(spans, key=lambda s: s.t_start)
    prev_end = -np.inf
    for s in spans:
        if s.t_start < prev_end:
            raise DataError(f"label spans overlap at t={s.t_start}")
        prev_end = s.t_end
        a, b = np.searchsorted(grid, [s.t_start, s.t_end])
        labels[a:b] = s.label
        trials[a:b] = s.trial
        reps[a:b] = s.repetition
    # fill uncovered trial/rep ids from the following span, then the tail
    covered = trials >= 0
    if covered.any():
        idxs = np.where(covered, np.arange(T), T)
        nxt = np.minimum.accumulate(idxs[::-1])[::-1]
        miss = ~covered
        take = nxt[miss]
        fallback = np.flatnonzero(covered)[-1]
        take = np.where(take < T, take, fallback)
        trials[miss] = trials[take]
        reps[miss] = reps[take]
    else:
        trials[:] = 0
        reps[:] = 0
    return labels, trials, reps


def notch_filter(sig, line_freq, rate, q=30.0):
    """Zero-phase second-order IIR notch, applied per channel.

    Forward-backward filtering keeps the phase flat; Q=30 gives a band of
    roughly line_freq/30 around the line frequency.
    """
    if not 0 < line_freq < rate / 2:
        raise ValueError(
            f"line frequency {line_freq} Hz must lie below Nyquist ({rate / 2} Hz)"
        )
    sig = np.asarray(sig, dtype=np.float64)
    b, a = signal.iirnotch(line_freq / (rate / 2), q)
    return signal.filtfilt(b, a, sig, axis=0)


# ---------------------------------------------------------------------------
# CSV loading
# ---------------------------------------------------------------------------

EMG_TIME_COL = "t"
GAZE_COLS = ["t", "x", "y", "valid"]
LABEL_COLS = ["t_start", "t_end", "label", "trial", "repetition"]


def _read_numeric_csv(path, expected_cols=None):
    path = Path(path)
    try:
        df = pd.read_csv(path)
    except Exception as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if expected_cols is not None and list(df.columns) != expected_cols:
        raise ParseError(
            f"{path}: header {list(df.columns)} does not match {expected_cols}"
        )
    for col in df.columns:
        series = df[col]
        if series.dtype == object:
            coerced = pd.to_numeric(series, errors="coerce")
            bad = coerced.isna() & series.notna()
            if bad.any():
                row = int(bad.idxmax())
                raise ParseError(
                    f"{path}: malformed value {series[row]!r} in column "
                    f"{col!r}, line {row + 2}"
                )
            df[col] = coerced
        if df[col].isna().any():
            row = int(df[col].isna().idxmax())
            raise ParseError(f"{path}: NaN in column {col!r}, line {row + 2}")
    return df


def load_emg_csv(path) -> EmgStream:
    df = _read_numeric_csv(path)
    if df.columns[0] != EMG_TIME_COL or len(df.columns) < 2:
        raise ParseError(f"{path}: expected header t,ch1..chC")
    return EmgStream(
        timestamps=df[EMG_TIME_COL].to_numpy(dtype=np.float64),
        samples=df.iloc[:, 1:].to_numpy(dtype=np.float64),
    )


def load_gaze_csv(path) -> GazeStream:
    df = _read_numeric_csv(path, GAZE_COLS)
    return GazeStream(
        timestamps=df["t"].to_numpy(dtype=np.float64),
        points=df[["x", "y"]].to_numpy(dtype=np.float64),
        validity=df["valid"].to_numpy() != 0,
    )


def load_labels_csv(path):
    df = _read_numeric_csv(path, LABEL_COLS)
    return [
        LabelSpan(
            t_start=float(r.t_start), t_end=float(r.t_end),
            label=int(r.label), trial=int(r.trial), repetition=int(r.repetition),
        )
        for r in df.itertuples()
    ]


def load_recording(emg_path, gaze_path, labels_path, rate=2000.0) -> SyncedRecording:
    """Load the three-CSV set and synchronize it at ``rate``."""
    emg = load_emg_csv(emg_path)
    gaze = load_gaze_csv(gaze_path)
    labels = load_labels_csv(labels_path)
    return synchronize(emg, gaze, labels, rate)


def load_recording_dir(path, rate=2000.0) -> SyncedRecording:
    """Load a directory written by ``mmgrasp synth`` (emg/gaze/labels CSVs)."""
    p = Path(path)
    return load_recording(p / "emg.csv", p / "gaze.csv", p / "labels.csv", rate)


def save_recording(rec: SyncedRecording, path):
    """Single-file binary container for a synced recording (.npz)."""
    np.savez(
        path,
        rate=np.float64(rec.rate),
        emg=rec.emg, gaze=rec.gaze, gaze_valid=rec.gaze_valid,
        labels=rec.labels, trial_ids=rec.trial_ids,
        repetition_ids=rec.repetition_ids,
    )


def load_recording_npz(path) -> SyncedRecording:
    with np.load(path) as z:
        return SyncedRecording(
            rate=float(z["rate"]),
            emg=z["emg"], gaze=z["gaze"], gaze_valid=z["gaze_valid"],
            labels=z["labels"], trial_ids=z["trial_ids"],
            repetition_ids=z["repetition_ids"],
        )
