"""Per-sample multicue features: EMG wavelet marginals + propagated visual vectors.

The EMG descriptor is the marginal discrete wavelet transform of a short
trailing window: per channel, the signal is decomposed with a Daubechies-7
filter bank (symmetric padding) and each detail level contributes the sum of
absolute coefficients, plus one marginal for the deepest approximation.  A
window of C channels at L levels therefore yields C*(L+1) nonnegative values.

The visual descriptor of a sample is the feature of the most recent fixation
at or before it, held constant until the next fixation.  Samples before the
first fixation carry a configurable default (zero by default); samples after
a grasp keep the previous object's feature, which is intentional.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numba import njit, prange

# Daubechies-7 scaling filter (reconstruction lowpass), standard published
# coefficients; validated in the test suite against a spectral-factorization
# construction and the orthonormality identities.
DB7_REC_LO = np.array([
    0.077852054085062364,
    0.39653931948230575,
    0.72913209084655506,
    0.4697822874053586,
    -0.14390600392910627,
    -0.22403618499416572,
    0.071309219267050042,
    0.080612609151065898,
    -0.038029936935034633,
    -0.01657454163101562,
    0.012550998556013784,
    0.00042957797300470274,
    -0.0018016407039998328,
    0.00035371380000103988,
])

DB7_DEC_LO = DB7_REC_LO[::-1].copy()
# alternating-flip quadrature mirror of the scaling filter
DB7_DEC_HI = np.array(
    [(-1.0) ** (k + 1) * DB7_REC_LO[k] for k in range(len(DB7_REC_LO))]
)


@dataclass(frozen=True)
class MdwtConfig:
    """Wavelet-marginal feature configuration."""

    window_s: float = 0.200
    wavelet: str = "db7"
    levels: int = 3
    padding: str = "symmetric"

    def __post_init__(self):
        if self.wavelet != "db7":
            raise ValueError(f"unsupported wavelet {self.wavelet!r} (only db7)")
        if self.padding != "symmetric":
            raise ValueError(f"unsupported padding {self.padding!r}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.window_s <= 0:
            raise ValueError("window must be positive")

    def window_samples(self, rate):
        return int(round(self.window_s * rate))

    def feature_dim(self, n_channels):
        return n_channels * (self.levels + 1)


@njit(cache=True)
def _dwt_level(x, lo, hi):  # pragma: no cover - exercised via mdwt
    """One analysis level: symmetric extension, filter, downsample by two.

    Output coefficient k is sum_j g[j] * e[2k + L - j] over the extended
    signal e (half-point symmetric padding of L-1 samples on each side).
    """
    n = x.shape[0]
    L = lo.shape[0]
    pad = L - 1
    e = np.empty(n + 2 * pad, dtype=np.float64)
    for i in range(pad):
        e[i] = x[pad - 1 - i]
        e[pad + n + i] = x[n - 1 - i]
    for i in range(n):
        e[pad + i] = x[i]
    out_len = (n + L - 1) // 2
    a = np.empty(out_len, dtype=np.float64)
    d = np.empty(out_len, dtype=np.float64)
    for k in range(out_len):
        base = 2 * k + L
        sa = 0.0
        sd = 0.0
        for j in range(L):
            v = e[base - j]
            sa += lo[j] * v
            sd += hi[j] * v
        a[k] = sa
        d[k] = sd
    return a, d


@njit(cache=True)
def _marginals_one(x, lo, hi, levels, out):  # pragma: no cover
    """Write [sum|d1|, ..., sum|dL|, sum|aL|] for one channel into ``out``."""
    a = x
    for lev in range(levels):
        a, d = _dwt_level(a, lo, hi)
        s = 0.0
        for i in range(d.shape[0]):
            s += abs(d[i])
        out[lev] = s
    s = 0.0
    for i in range(a.shape[0]):
        s += abs(a[i])
    out[levels] = s


@njit(parallel=True, cache=True)
def _mdwt_batch(emg, ends, w, lo, hi, levels):  # pragma: no cover
    n = ends.shape[0]
    n_ch = emg.shape[1]
    out = np.empty((n, n_ch * (levels + 1)), dtype=np.float64)
    for i in prange(n):
        t_end = ends[i]
        buf = np.empty(w, dtype=np.float64)
        for c in range(n_ch):
            for j in range(w):
                buf[j] = emg[t_end - w + 1 + j, c]
            _marginals_one(buf, lo, hi, levels, out[i, c * (levels + 1):])
    return out


def _check_window_supports_levels(w, levels):
    L = len(DB7_DEC_LO)
    n = w
    for _ in range(levels):
        if n < L:
            raise ValueError(
                f"window of {w} samples too short for {levels} db7 levels"
            )
        n = (n + L - 1) // 2


def mdwt(window, cfg: MdwtConfig):
    """Wavelet marginal feature vector of one EMG window [W, C].

    Returns a nonnegative vector of length C*(levels+1): per channel the
    absolute-coefficient sums of detail levels 1..levels followed by the
    deepest approximation, channels concatenated in order.
    """
    window = np.ascontiguousarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ValueError("window must be [W, C]")
    w, n_ch = window.shape
    _check_window_supports_levels(w, cfg.levels)
    out = np.empty(n_ch * (cfg.levels + 1), dtype=np.float64)
    for c in range(n_ch):
        _marginals_one(
            window[:, c].copy(), DB7_DEC_LO, DB7_DEC_HI, cfg.levels,
            out[c * (cfg.levels + 1):],
        )
    return out


@dataclass
class MulticueSample:
    """One time step's paired features."""

    emg_feat: np.ndarray
    vis_feat: np.ndarray
    label: int
    time: int
    repetition: int


@dataclass
class MulticueDataset:
    """Row-aligned multicue samples plus bookkeeping for CV and strides."""

    emg: np.ndarray      # [N, C*(levels+1)]
    vis: np.ndarray      # [N, visual_dim]
    labels: np.ndarray   # [N]
    times: np.ndarray    # [N] sample index into the source recording
    reps: np.ndarray     # [N]
    trials: np.ndarray   # [N]
    classes: np.ndarray  # sorted class ids present in the recording
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.emg.shape[0]
        for name in ("vis", "labels", "times", "reps", "trials"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"dataset field {name} has mismatched length")
        if n < 1:
            raise ValueError("dataset must contain at least one sample")

    def __len__(self):
        return self.emg.shape[0]

    def sample(self, i) -> MulticueSample:
        return MulticueSample(
            emg_feat=self.emg[i],
            vis_feat=self.vis[i],
            label=int(self.labels[i]),
            time=int(self.times[i]),
            repetition=int(self.reps[i]),
        )

    def select(self, idx) -> "MulticueDataset":
        return MulticueDataset(
            emg=np.ascontiguousarray(self.emg[idx]),
            vis=np.ascontiguousarray(self.vis[idx]),
            labels=self.labels[idx],
            times=self.times[idx],
            reps=self.reps[idx],
            trials=self.trials[idx],
            classes=self.classes,
            meta=dict(self.meta),
        )

    def subsample(self, factor, offset=0) -> "MulticueDataset":
        """Every ``factor``-th sample, tracked in metadata."""
        if factor < 1:
            raise ValueError("subsampling factor must be >= 1")
        ds = self.select(np.arange(offset, len(self), factor))
        ds.meta["subsampling"] = self.meta.get("subsampling", []) + [int(factor)]
        return ds


def _propagate_indices(fixation_times, query_times):
    fixation_times = np.asarray(fixation_times, dtype=np.int64)
    if fixation_times.size and np.any(np.diff(fixation_times) < 0):
        raise ValueError("fixation times must be sorted")
    return np.searchsorted(fixation_times, query_times, side="right") - 1


def propagate_visual(fixation_times, fix_features, T, default):
    """[T, D] matrix where row t holds the latest fixation feature at or
    before t; rows before the first fixation hold ``default``."""
    fix_features = np.asarray(fix_features, dtype=np.float64)
    default = np.asarray(default, dtype=np.float64)
    fixation_times = np.asarray(fixation_times, dtype=np.int64)
    if fixation_times.size != fix_features.shape[0]:
        raise ValueError("one feature row per fixation required")
    if fixation_times.size and (
        fixation_times[0] < 0 or fixation_times[-1] >= T
    ):
        raise ValueError("fixation times outside [0, T)")
    idx = _propagate_indices(fixation_times, np.arange(T))
    out = np.empty((T, default.shape[0]), dtype=np.float64)
    out[idx < 0] = default
    valid = idx >= 0
    out[valid] = fix_features[idx[valid]]
    return out


def build_dataset(rec, fixation_times, fix_features, cfg: MdwtConfig, stride,
                  default_visual=None) -> MulticueDataset:
    """Slide an MDWT window over a synced recording and pair it with the
    propagated visual feature; one sample per ``stride`` steps.

    The window ends at the sample carrying the label, i.e. sample k uses
    EMG rows [t_k - W + 1, t_k] with t_k = W - 1 + k*stride.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    w = cfg.window_samples(rec.rate)
    _check_window_supports_levels(w, cfg.levels)
    T = rec.emg.shape[0]
    if T < w:
        raise ValueError(f"recording of {T} samples shorter than one window ({w})")
    fix_features = np.asarray(fix_features, dtype=np.float64)
    if default_visual is None:
        dim = fix_features.shape[1] if fix_features.size else 0
        default_visual = np.zeros(dim, dtype=np.float64)
    default_visual = np.asarray(default_visual, dtype=np.float64)

    ends = np.arange(w - 1, T, stride, dtype=np.int64)
    emg_feat = _mdwt_batch(
        np.ascontiguousarray(rec.emg, dtype=np.float64),
        ends, w, DB7_DEC_LO, DB7_DEC_HI, cfg.levels,
    )
    idx = _propagate_indices(fixation_times, ends)
    vis_feat = np.empty((ends.size, default_visual.shape[0]), dtype=np.float64)
    vis_feat[idx < 0] = default_visual
    has_fix = idx >= 0
    if fix_features.size:
        vis_feat[has_fix] = fix_features[idx[has_fix]]

    return MulticueDataset(
        emg=emg_feat,
        vis=np.ascontiguousarray(vis_feat),
        labels=rec.labels[ends].astype(np.int64),
        times=ends,
        reps=rec.repetition_ids[ends].astype(np.int64),
        trials=rec.trial_ids[ends].astype(np.int64),
        classes=np.unique(rec.labels).astype(np.int64),
        meta={"stride": int(stride), "window": int(w), "rate": float(rec.rate)},
    )


def save_dataset(ds: MulticueDataset, path):
    np.savez(
        path,
        emg=ds.emg, vis=ds.vis, labels=ds.labels, times=ds.times,
        reps=ds.reps, trials=ds.trials, classes=ds.classes,
        meta=np.bytes_(json.dumps(ds.meta).encode()),
    )


def load_dataset(path) -> MulticueDataset:
    with np.load(path) as z:
        return MulticueDataset(
            emg=z["emg"], vis=z["vis"], labels=z["labels"], times=z["times"],
            reps=z["reps"], trials=z["trials"], classes=z["classes"],
            meta=json.loads(bytes(z["meta"]).decode()),
        )


def export_dataset_csv(ds: MulticueDataset, path):
    """Debug-friendly flat CSV of the dataset (one row per sample)."""
    d_e, d_v = ds.emg.shape[1], ds.vis.shape[1]
    header = (
        ["time", "label", "trial", "repetition"]
        + [f"emg{i}" for i in range(d_e)]
        + [f"vis{i}" for i in range(d_v)]
    )
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for i in range(len(ds)):
            row = [
                str(int(ds.times[i])), str(int(ds.labels[i])),
                str(int(ds.trials[i])), str(int(ds.reps[i])),
            ]
            row += [repr(v) for v in ds.emg[i]]
            row += [repr(v) for v in ds.vis[i]]
            f.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# Per-fixation feature file, shared with the external patch-embedding tool.
# Layout (little-endian): magic 'MMGF', u8 version, u8 float width (4 or 8),
# u16 zero, u32 row count, u32 feature dim, then rows of (i64 fixation id,
# dim floats).
# ---------------------------------------------------------------------------

_MMGF_MAGIC = b"MMGF"


def write_fixation_features(path, fixation_ids, features):
    features = np.asarray(features)
    if features.dtype == np.float32:
        width = 4
    else:
        features = features.astype(np.float64)
        width = 8
    fixation_ids = np.asarray(fixation_ids, dtype=np.int64)
    if features.ndim != 2 or fixation_ids.shape[0] != features.shape[0]:
        raise ValueError("features must be [N, D] with one id per row")
    n, dim = features.shape
    header = (
        _MMGF_MAGIC
        + bytes([1, width, 0, 0])
        + int(n).to_bytes(4, "little")
        + int(dim).to_bytes(4, "little")
    )
    with open(path, "wb") as f:
        f.write(header)
        for i in range(n):
            f.write(int(fixation_ids[i]).to_bytes(8, "little", signed=True))
            f.write(features[i].astype(f"<f{width}", copy=False).tobytes())


def read_fixation_features(path):
    """Read a fixation-feature file; returns (ids [N], features [N, D])."""
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16 or head[:4] != _MMGF_MAGIC:
            raise ValueError(f"{path}: not a fixation-feature file")
        version, width = head[4], head[5]
        if version != 1 or width not in (4, 8):
            raise ValueError(f"{path}: unsupported version/float width")
        n = int.from_bytes(head[8:12], "little")
        dim = int.from_bytes(head[12:16], "little")
        ids = np.empty(n, dtype=np.int64)
        feats = np.empty((n, dim), dtype=np.float64 if width == 8 else np.float32)
        row_bytes = 8 + dim * width
        for i in range(n):
            row = f.read(row_bytes)
            if len(row) != row_bytes:
                raise ValueError(f"{path}: truncated at row {i}")
            ids[i] = int.from_bytes(row[:8], "little", signed=True)
            feats[i] = np.frombuffer(row, dtype=f"<f{width}", offset=8, count=dim)
    return ids, feats
