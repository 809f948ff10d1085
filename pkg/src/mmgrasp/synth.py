"""Synthetic recordings that structurally mimic the acquisition protocol.

Each trial is a rest phase followed by a grasp phase.  EMG is a per-class
nonnegative synergy vector times a rise/hold/fall envelope times rectified
AR(1) noise, plus white sensor noise.  The envelope is piecewise log-linear:
the reach-phase rise is exponential, because a rolling z-score detector only
stays above its sensitivity threshold through a sustained *accelerating*
rise (a straight ramp settles near sqrt(3) standard deviations and would cut
onset intervals short of the planted fixations).  Holds decay gently, which
keeps the rolling z-score of the idle signal slightly negative and false
onsets rare.

Gaze is a saccade/jitter process: wander around the table during rest,
tighter search jitter around the upcoming object during the reach, then a
planted fixation 300-600 ms before the grasp that stares through the early
grasp.  Wander/search/stare jitter scales are chosen so the adaptive
volatility threshold lands just below the search band: the plant then
crosses it within a few tens of milliseconds, and only there.

Visual features are class-conditional Gaussian clusters per object; grasps
share objects many-to-many so the object alone does not identify the grasp.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil, log

import numpy as np
from scipy.signal import lfilter

from .ingest import EmgStream, GazeStream, LabelSpan, SyncedRecording, synchronize

AR_COEFF = 0.9                 # rectified AR(1) surrogate for the EMG envelope
SENSOR_NOISE_FRAC = 0.05       # white noise, relative to the rest RMS
RAMP_OVERSHOOT_S = 0.10        # EMG keeps rising a beat past the label onset
CLASS_GAIN_JITTER = 0.10       # per-class plateau spread (log scale)
SYNERGY_JITTER = 0.25          # log-scale perturbation between paired classes
REST_JUMP_MEAN_S = 2.5         # mean gap between idle re-fixation saccades
REST_JUMP_SPREAD_PX = 80.0     # how far idle saccades move the wander center
SCAN_JITTER_RATIO = 1.20       # search jitter relative to wander jitter
SETTLE_JITTER_RATIO = 0.70     # pre-fixation landing jitter
SETTLE_S = 0.15                # landing time just before the stable fixation
FEATURE_CENTER_SCALE = 40.0    # object feature cluster centers
FEATURE_NOISE_SCALE = 20.0     # per-fixation feature noise (per dimension)
TABLE_CENTER = (960.0, 540.0)  # nominal scene mid-point, pixels
TAIL_REST_S = 1.0              # idle tail after the last trial


@dataclass(frozen=True)
class SynthConfig:
    """Generator configuration; the seed fully determines the output."""

    n_grasps: int = 10
    objects_per_grasp: int = 3
    n_reps: int = 4
    rest_duration: tuple = (3.0, 4.0)
    grasp_duration: tuple = (4.0, 5.0)
    emg_channels: int = 12
    visual_dim: int = 64
    gaze_noise_px: float = 1.5
    object_sharing: dict | None = None   # grasp index -> iterable of object ids
    seed: int = 0

    emg_rate: float = 2000.0
    gaze_rate: float = 100.0
    rest_rms: float = 2.5e-4             # volts
    grasp_rms_ratio: float = 1800.0      # plateau RMS over rest RMS, >= 3
    reach_s: float = 0.75                # EMG rise ahead of the grasp label
    scan_lead_s: float = 0.30            # gaze reaches the object region first
    plant_range_s: tuple = (0.30, 0.60)  # fixation plant before grasp onset
    stare_s: float = 2.5                 # stare carried into the grasp
    hold_decay: float = 0.15             # relative RMS decay per second on holds
    release_s: float = 0.30
    rest_wander_px: float = 40.0         # wander jitter (per axis)

    def __post_init__(self):
        if min(self.n_grasps, self.objects_per_grasp, self.n_reps) < 0:
            raise ValueError("counts must be nonnegative")
        if not (0 < self.rest_duration[0] <= self.rest_duration[1]):
            raise ValueError("bad rest duration range")
        if not (0 < self.grasp_duration[0] <= self.grasp_duration[1]):
            raise ValueError("bad grasp duration range")
        if self.grasp_rms_ratio < 3.0:
            raise ValueError("grasp/rest RMS ratio must be >= 3")
        if self.rest_duration[0] < self.reach_s + self.scan_lead_s + 0.2:
            raise ValueError("rest too short for the reach and scan lead")
        if self.plant_range_s[1] > self.reach_s - 0.05:
            raise ValueError("fixation plant must fall inside the reach phase")
        if self.emg_channels < 1 or self.visual_dim < 1:
            raise ValueError("channel and feature dims must be >= 1")

    def sharing(self):
        """grasp -> object ids; default interleaves a half-size object pool
        so most objects serve two grasps (many-to-many)."""
        if self.object_sharing is not None:
            m = {int(g): tuple(int(o) for o in objs)
                 for g, objs in self.object_sharing.items()}
            for g in range(self.n_grasps):
                if not m.get(g):
                    raise ValueError(f"grasp {g} has no objects")
            return m
        pool = self.n_objects()
        return {
            g: tuple((2 * g + j) % pool for j in range(self.objects_per_grasp))
            for g in range(self.n_grasps)
        }

    def n_objects(self):
        if self.object_sharing is not None:
            return 1 + max(max(objs) for objs in self.object_sharing.values())
        return max(1, ceil(self.n_grasps * self.objects_per_grasp / 2))


@dataclass
class ObjectFeatureBank:
    """Synthetic stand-in for per-object deep visual features."""

    centers: np.ndarray       # [P, visual_dim]
    positions: np.ndarray     # [P, 2] screen pixels
    noise_scale: float        # per-fixation feature noise

    def nearest(self, point):
        d = np.linalg.norm(self.positions - np.asarray(point)[None, :], axis=1)
        return int(np.argmin(d))


@dataclass
class FixationTruth:
    """Planted fixation ground truth, one row per trial."""

    times: np.ndarray         # [F] seconds (plant instants)
    object_ids: np.ndarray    # [F]
    positions: np.ndarray     # [F, 2]
    trials: np.ndarray        # [F]
    grasps: np.ndarray        # [F] grasp label (1-based class id)


@dataclass
class _TrialPlan:
    trial: int
    rep: int
    grasp: int                # 0-based grasp index; label = grasp + 1
    object_id: int
    t_start: float
    t_g: float                # grasp label onset
    t_end: float              # grasp label end
    t_scan: float             # gaze moves to the object region
    t_fix: float              # fixation plant
    t_stare_end: float


def _plan_trials(cfg: SynthConfig, rng):
    sharing = cfg.sharing()
    plans = []
    t = 0.0
    trial = 0
    for g in range(cfg.n_grasps):
        for obj in sharing[g]:
            for rep in range(cfg.n_reps):
                rest = rng.uniform(*cfg.rest_duration)
                grasp = rng.uniform(*cfg.grasp_duration)
                t_g = t + rest
                t_end = t_g + grasp
                delta = rng.uniform(*cfg.plant_range_s)
                plans.append(_TrialPlan(
                    trial=trial, rep=rep, grasp=g, object_id=obj,
                    t_start=t, t_g=t_g, t_end=t_end,
                    t_scan=t_g - cfg.reach_s - cfg.scan_lead_s,
                    t_fix=t_g - delta,
                    t_stare_end=min(t_g + cfg.stare_s, t_end),
                ))
                t = t_end + cfg.release_s
                trial += 1
    return plans, t + TAIL_REST_S


def _synergies(cfg: SynthConfig, rng):
    """Per-class channel gain vectors with built-in confusable pairs: classes
    g and g + n_base share a base pattern up to a log-normal perturbation."""
    n_base = max(1, cfg.n_grasps // 2)
    bases = rng.gamma(shape=2.0, scale=0.5, size=(n_base, cfg.emg_channels)) + 0.2
    syn = np.empty((cfg.n_grasps, cfg.emg_channels))
    for g in range(cfg.n_grasps):
        s = bases[g % n_base] * np.exp(rng.normal(0.0, SYNERGY_JITTER, cfg.emg_channels))
        syn[g] = s / s.mean()
    return syn


def _emg_envelope_knots(cfg: SynthConfig, plans, class_gain, total_end):
    """Piecewise log-linear envelope knots shared by all channels."""
    log_r0 = log(cfg.rest_rms)
    d = cfg.hold_decay
    kt = [0.0]
    kv = [log_r0]
    rest_begin = 0.0
    for p in plans:
        t_reach = p.t_g - cfg.reach_s
        kt.append(t_reach)
        kv.append(log_r0 - d * (t_reach - rest_begin))
        ramp_end = p.t_g + RAMP_OVERSHOOT_S
        log_a = log(cfg.rest_rms * cfg.grasp_rms_ratio) + class_gain[p.grasp]
        kt.append(ramp_end)
        kv.append(log_a)
        kt.append(p.t_end)
        kv.append(log_a - d * (p.t_end - ramp_end))
        kt.append(p.t_end + cfg.release_s)
        kv.append(log_r0)
        rest_begin = p.t_end + cfg.release_s
    kt.append(total_end)
    kv.append(log_r0 - d * (total_end - rest_begin))
    return np.array(kt), np.array(kv)


def _gen_emg(cfg: SynthConfig, plans, synergies, class_gain, total_end, rng):
    rate = cfg.emg_rate
    T = int(np.floor(total_end * rate)) + 1
    t = np.arange(T) / rate
    kt, kv = _emg_envelope_knots(cfg, plans, class_gain, total_end)
    env = np.exp(np.interp(t, kt, kv))

    ar_sigma = 1.0 / np.sqrt(1.0 - AR_COEFF**2)
    x = lfilter([1.0], [1.0, -AR_COEFF],
                rng.standard_normal((T, cfg.emg_channels)), axis=0)
    np.abs(x, out=x)
    x *= env[:, None] / ar_sigma
    for p in plans:
        a = int(np.searchsorted(t, p.t_g - cfg.reach_s))
        b = int(np.searchsorted(t, p.t_end + cfg.release_s))
        x[a:b] *= synergies[p.grasp][None, :]
    x += rng.normal(0.0, SENSOR_NOISE_FRAC * cfg.rest_rms, (T, cfg.emg_channels))
    return EmgStream(timestamps=t, samples=x)


def _wander(rng, n, center, sigma, jump_rate_s, rate):
    """Jittered wander with occasional re-fixation jumps of the center."""
    pts = np.empty((n, 2))
    i = 0
    c = np.asarray(center, dtype=np.float64)
    while i < n:
        seg = n - i
        if jump_rate_s > 0:
            seg = min(seg, max(1, int(rng.exponential(jump_rate_s) * rate)))
        pts[i:i + seg] = c[None, :] + rng.normal(0.0, sigma, (seg, 2))
        c = np.asarray(center) + rng.normal(0.0, REST_JUMP_SPREAD_PX, 2)
        i += seg
    return pts


def _gen_gaze(cfg: SynthConfig, plans, obj_pos, total_end, rng):
    rate = cfg.gaze_rate
    T = int(np.floor(total_end * rate)) + 1
    t = np.arange(T) / rate
    pts = np.empty((T, 2))

    def srt(x):
        return int(np.searchsorted(t, x))

    cursor = 0
    for p in plans:
        o = obj_pos[p.object_id]
        a = srt(p.t_scan)
        pts[cursor:a] = _wander(rng, a - cursor, TABLE_CENTER,
                                cfg.rest_wander_px, REST_JUMP_MEAN_S, rate)
        b0 = srt(p.t_fix - SETTLE_S)
        pts[a:b0] = o[None, :] + rng.normal(
            0.0, SCAN_JITTER_RATIO * cfg.rest_wander_px, (b0 - a, 2))
        b = srt(p.t_fix)
        pts[b0:b] = o[None, :] + rng.normal(
            0.0, SETTLE_JITTER_RATIO * cfg.rest_wander_px, (b - b0, 2))
        c = srt(p.t_stare_end)
        pts[b:c] = o[None, :] + rng.normal(0.0, cfg.gaze_noise_px, (c - b, 2))
        d = srt(p.t_end)
        pts[c:d] = _wander(rng, d - c, o, cfg.rest_wander_px,
                           REST_JUMP_MEAN_S, rate)
        cursor = d
    pts[cursor:] = _wander(rng, T - cursor, TABLE_CENTER,
                           cfg.rest_wander_px, REST_JUMP_MEAN_S, rate)
    return GazeStream(timestamps=t, points=pts,
                      validity=np.ones(T, dtype=bool))


def _object_layout(cfg: SynthConfig, rng):
    """Fixed scene positions for the object pool, spread over the table."""
    n = cfg.n_objects()
    cols = int(ceil(np.sqrt(n)))
    rows = int(ceil(n / cols))
    xs = np.linspace(400.0, 1520.0, cols)
    ys = np.linspace(280.0, 800.0, max(rows, 2))[:rows]
    pos = np.array([(x, y) for y in ys for x in xs])[:n]
    return pos + rng.uniform(-30.0, 30.0, pos.shape)


def _label_spans(plans):
    spans = []
    for p in plans:
        spans.append(LabelSpan(p.t_start, p.t_g, 0, p.trial, p.rep))
        spans.append(LabelSpan(p.t_g, p.t_end, p.grasp + 1, p.trial, p.rep))
    return spans


def generate_streams(cfg: SynthConfig):
    """Raw synthetic streams plus ground truth.

    Returns (EmgStream, GazeStream, label spans, FixationTruth,
    ObjectFeatureBank); everything is a pure function of the config.
    """
    root = np.random.SeedSequence([cfg.seed, 0x6D6D67])
    r_plan, r_layout, r_syn, r_emg, r_gaze, r_feat = (
        np.random.default_rng(s) for s in root.spawn(6)
    )
    plans, total_end = _plan_trials(cfg, r_plan)
    positions = _object_layout(cfg, r_layout)
    bank = ObjectFeatureBank(
        centers=r_feat.normal(0.0, FEATURE_CENTER_SCALE,
                              (cfg.n_objects(), cfg.visual_dim)),
        positions=positions,
        noise_scale=FEATURE_NOISE_SCALE,
    )
    synergies = _synergies(cfg, r_syn)
    class_gain = r_syn.normal(0.0, CLASS_GAIN_JITTER, max(cfg.n_grasps, 1))

    truth = FixationTruth(
        times=np.array([p.t_fix for p in plans]),
        object_ids=np.array([p.object_id for p in plans], dtype=np.int64),
        positions=np.array([positions[p.object_id] for p in plans])
        if plans else np.empty((0, 2)),
        trials=np.array([p.trial for p in plans], dtype=np.int64),
        grasps=np.array([p.grasp + 1 for p in plans], dtype=np.int64),
    )

    if not plans:
        emg = EmgStream(timestamps=np.empty(0), samples=np.empty((0, cfg.emg_channels)))
        gaze = GazeStream(timestamps=np.empty(0), points=np.empty((0, 2)),
                          validity=np.empty(0, dtype=bool))
        return emg, gaze, [], truth, bank

    emg = _gen_emg(cfg, plans, synergies, class_gain, total_end, r_emg)
    gaze = _gen_gaze(cfg, plans, positions, total_end, r_gaze)
    return emg, gaze, _label_spans(plans), truth, bank


def generate_synthetic(cfg: SynthConfig):
    """Synthesize and synchronize one recording.

    Returns (SyncedRecording, FixationTruth, ObjectFeatureBank).
    """
    emg, gaze, spans, truth, bank = generate_streams(cfg)
    if emg.timestamps.size == 0:
        rec = SyncedRecording(
            rate=cfg.emg_rate,
            emg=np.empty((0, cfg.emg_channels)),
            gaze=np.empty((0, 2)),
            gaze_valid=np.empty(0, dtype=bool),
            labels=np.empty(0, dtype=np.int64),
            trial_ids=np.empty(0, dtype=np.int64),
            repetition_ids=np.empty(0, dtype=np.int64),
        )
        return rec, truth, bank
    rec = synchronize(emg, gaze, spans, cfg.emg_rate)
    return rec, truth, bank


def fixation_features(bank: ObjectFeatureBank, centroids, seed):
    """Per-fixation visual features: nearest object's cluster center plus
    seeded Gaussian noise (deterministic given the fixation list)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFEA7]))
    centroids = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    out = np.empty((centroids.shape[0], bank.centers.shape[1]))
    ids = np.empty(centroids.shape[0], dtype=np.int64)
    for i, c in enumerate(centroids):
        obj = bank.nearest(c)
        ids[i] = obj
        out[i] = bank.centers[obj] + rng.normal(0.0, bank.noise_scale,
                                                bank.centers.shape[1])
    return ids, out


# ---------------------------------------------------------------------------
# CSV output (the formats the ingest loader reads back)
# ---------------------------------------------------------------------------

FLOAT_FMT = "%.10g"


def _fmt(v):
    return FLOAT_FMT % v


def write_synth_dir(outdir, emg: EmgStream, gaze: GazeStream, spans,
                    truth: FixationTruth, bank: ObjectFeatureBank):
    """Write emg/gaze/labels CSVs plus objects.csv and fixations_truth.csv."""
    from pathlib import Path

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    n_ch = emg.samples.shape[1]
    header = "t," + ",".join(f"ch{i + 1}" for i in range(n_ch))
    body = np.column_stack([emg.timestamps, emg.samples])
    np.savetxt(outdir / "emg.csv", body, fmt=FLOAT_FMT, delimiter=",",
               header=header, comments="")

    body = np.column_stack([gaze.timestamps, gaze.points,
                            gaze.validity.astype(np.float64)])
    np.savetxt(outdir / "gaze.csv", body, fmt=[FLOAT_FMT, FLOAT_FMT, FLOAT_FMT, "%d"],
               delimiter=",", header="t,x,y,valid", comments="")

    with open(outdir / "labels.csv", "w") as f:
        f.write("t_start,t_end,label,trial,repetition\n")
        for s in spans:
            f.write(f"{_fmt(s.t_start)},{_fmt(s.t_end)},{s.label},{s.trial},{s.repetition}\n")

    with open(outdir / "objects.csv", "w") as f:
        dim = bank.centers.shape[1]
        f.write("object,x,y," + ",".join(f"f{i}" for i in range(dim)) + "\n")
        for i in range(bank.centers.shape[0]):
            row = [str(i), _fmt(bank.positions[i, 0]), _fmt(bank.positions[i, 1])]
            row += [_fmt(v) for v in bank.centers[i]]
            f.write(",".join(row) + "\n")

    with open(outdir / "fixations_truth.csv", "w") as f:
        f.write("t,object,x,y,trial\n")
        for i in range(truth.times.shape[0]):
            f.write(",".join([
                _fmt(truth.times[i]), str(int(truth.object_ids[i])),
                _fmt(truth.positions[i, 0]), _fmt(truth.positions[i, 1]),
                str(int(truth.trials[i])),
            ]) + "\n")


def load_object_bank(path):
    """Read objects.csv back into an ObjectFeatureBank."""
    import pandas as pd

    df = pd.read_csv(path)
    feat_cols = [c for c in df.columns if c.startswith("f")]
    return ObjectFeatureBank(
        centers=df[feat_cols].to_numpy(dtype=np.float64),
        positions=df[["x", "y"]].to_numpy(dtype=np.float64),
        noise_scale=FEATURE_NOISE_SCALE,
    )
