"""Repetition-wise cross-validation, hyperparameter grid search, and the
offline evaluation metrics: sample accuracy, confusion matrices and their
normalized differences, causal majority-vote smoothing, movement error rate
(edit distance between collapsed movement strings), prediction delay, and
the phase-normalized error curve over rest [-1, 0] and grasp [0, +1].
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from . import krls
from .features import MulticueDataset
from .kernels import KernelConfig, gram

DEFAULT_K_SWEEP = (1, 3, 5, 11, 25, 50, 100, 150, 250)
PREDICT_BLOCK = 4096


def _weight_grid():
    return tuple((k / 10, (10 - k) / 10) for k in range(11))


@dataclass(frozen=True)
class GridSpec:
    """Dense hyperparameter grid; defaults cover the standard search ranges."""

    lambdas: tuple = tuple(2.0 ** e for e in range(-14, -3, 2))
    gammas_chi2: tuple = tuple(2.0 ** e for e in range(-14, -7, 2))
    gammas_rbf: tuple = tuple(2.0 ** e for e in range(-20, -13, 2))
    weight_pairs: tuple = _weight_grid()

    def __post_init__(self):
        if not (self.lambdas and self.gammas_chi2 and self.gammas_rbf
                and self.weight_pairs):
            raise ValueError("grid axes must be nonempty")
        for we, wc in self.weight_pairs:
            if abs(we + wc - 1.0) > 1e-12:
                raise ValueError(f"weight pair ({we}, {wc}) does not sum to 1")

    @property
    def size(self):
        return (len(self.lambdas) * len(self.gammas_chi2)
                * len(self.gammas_rbf) * len(self.weight_pairs))

    def for_cue(self, cue):
        """Restrict the grid to a cue: single-cue runs pin the weights and
        collapse the unused kernel's bandwidth axis."""
        if cue == "emg":
            return replace(self, weight_pairs=((1.0, 0.0),),
                           gammas_rbf=(self.gammas_rbf[0],))
        if cue == "cnn":
            return replace(self, weight_pairs=((0.0, 1.0),),
                           gammas_chi2=(self.gammas_chi2[0],))
        if cue == "emg+cnn":
            return self
        raise ValueError(f"unknown cue {cue!r}")


def cv_splits(ds: MulticueDataset, n_reps):
    """One fold per repetition: fold i tests on repetition i, trains on the
    rest.  Every movement must appear in every repetition."""
    if n_reps < 2:
        raise ValueError("need at least 2 repetitions to hold one out")
    reps = np.unique(ds.reps)
    expected = np.arange(n_reps)
    if not np.array_equal(reps, expected):
        raise ValueError(f"repetitions {reps} do not match 0..{n_reps - 1}")
    for label in np.unique(ds.labels):
        if label == 0:
            continue
        have = np.unique(ds.reps[ds.labels == label])
        if not np.array_equal(have, expected):
            raise ValueError(f"movement {label} is missing repetitions")
    splits = []
    for r in expected:
        test = np.flatnonzero(ds.reps == r)
        train = np.flatnonzero(ds.reps != r)
        splits.append((train, test))
    return splits


def _inner_folds(ds):
    reps = np.unique(ds.reps)
    if reps.size < 2:
        raise ValueError("grid search needs >= 2 repetitions in the training set")
    return [(np.flatnonzero(ds.reps != r), np.flatnonzero(ds.reps == r))
            for r in reps]


def grid_search(train_ds: MulticueDataset, grid: GridSpec, n_classes=None):
    """Pick hyperparameters by repetition-wise inner CV accuracy.

    Every grid point is scored as the mean validation accuracy over inner
    folds (one per training repetition).  Ties prefer stronger
    regularization: larger lambda, then smaller bandwidths, then more weight
    on the EMG cue.

    Returns (KernelConfig, lambda).
    """
    if n_classes is None:
        n_classes = int(train_ds.classes.max()) + 1
    folds = _inner_folds(train_ds)
    need_chi2 = any(we != 0.0 for we, _ in grid.weight_pairs)
    need_rbf = any(wc != 0.0 for _, wc in grid.weight_pairs)

    fold_grams = []
    for tr, va in folds:
        emg_tr, emg_va = train_ds.emg[tr], train_ds.emg[va]
        vis_tr, vis_va = train_ds.vis[tr], train_ds.vis[va]
        chi2 = {}
        rbf = {}
        if need_chi2:
            from .kernels import chi2_gram
            for gc in grid.gammas_chi2:
                chi2[gc] = (chi2_gram(emg_tr, emg_tr, gc),
                            chi2_gram(emg_va, emg_tr, gc))
        if need_rbf:
            from .kernels import rbf_gram
            for gr in grid.gammas_rbf:
                rbf[gr] = (rbf_gram(vis_tr, vis_tr, gr),
                           rbf_gram(vis_va, vis_tr, gr))
        fold_grams.append((chi2, rbf, train_ds.labels[tr], train_ds.labels[va]))

    best = None
    for gc in grid.gammas_chi2:
        for gr in grid.gammas_rbf:
            for we, wc in grid.weight_pairs:
                accs = {lam: 0.0 for lam in grid.lambdas}
                for chi2, rbf, y_tr, y_va in fold_grams:
                    K_tr = None
                    K_va = None
                    if we != 0.0:
                        K_tr = we * chi2[gc][0]
                        K_va = we * chi2[gc][1]
                    if wc != 0.0:
                        K_tr = wc * rbf[gr][0] if K_tr is None else K_tr + wc * rbf[gr][0]
                        K_va = wc * rbf[gr][1] if K_va is None else K_va + wc * rbf[gr][1]
                    for lam in grid.lambdas:
                        model = krls.train(K_tr, y_tr, lam, n_classes)
                        _, pred = krls.predict(model, K_va)
                        accs[lam] += accuracy(pred, y_va)
                for lam in grid.lambdas:
                    # ties prefer larger lambda, smaller gammas, more EMG
                    key = (accs[lam] / len(fold_grams), lam, -gc, -gr, we)
                    if best is None or key > best[0]:
                        best = (key, KernelConfig(gc, gr, we, wc), lam)
    return best[1], best[2]


@njit(cache=True)
def _majority_vote(preds, k, n_classes):  # pragma: no cover
    T = preds.shape[0]
    out = np.empty(T, dtype=preds.dtype)
    counts = np.zeros(n_classes, dtype=np.int64)
    for t in range(T):
        counts[preds[t]] += 1
        if t >= k:
            counts[preds[t - k]] -= 1
        best = -1
        best_c = 0
        tie = False
        for c in range(n_classes):
            if counts[c] > best:
                best = counts[c]
                best_c = c
                tie = False
            elif counts[c] == best:
                tie = True
        if tie and t > 0:
            out[t] = out[t - 1]
        else:
            out[t] = best_c
    return out


def majority_vote(preds, k):
    """Causal modal smoothing over the trailing ``min(k, t+1)`` predictions.

    Ties keep the previous output; the first output equals the first input.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    preds = np.asarray(preds, dtype=np.int64)
    if preds.size == 0:
        return preds.copy()
    if preds.min() < 0:
        raise ValueError("class ids must be nonnegative")
    return _majority_vote(preds, int(k), int(preds.max()) + 1)


def accuracy(preds, truth):
    """Fraction of matching samples."""
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    if preds.shape != truth.shape:
        raise ValueError("prediction/truth length mismatch")
    return float(np.mean(preds == truth))


def rle(seq):
    """Collapse consecutive duplicates into the movement string."""
    seq = np.asarray(seq)
    if seq.size == 0:
        return seq.copy()
    keep = np.empty(seq.size, dtype=bool)
    keep[0] = True
    keep[1:] = seq[1:] != seq[:-1]
    return seq[keep]


@njit(cache=True)
def _levenshtein(a, b):  # pragma: no cover
    n = a.shape[0]
    m = b.shape[0]
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=np.int64)
    for i in range(n):
        cur[0] = i + 1
        for j in range(m):
            cost = 0 if a[i] == b[j] else 1
            v = prev[j] + cost
            if prev[j + 1] + 1 < v:
                v = prev[j + 1] + 1
            if cur[j] + 1 < v:
                v = cur[j] + 1
            cur[j + 1] = v
        prev, cur = cur, prev
    return prev[m]


def levenshtein(a, b):
    """Edit distance between two integer sequences (insert/delete/substitute)."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.size == 0:
        return int(b.size)
    if b.size == 0:
        return int(a.size)
    return int(_levenshtein(a, b))


def movement_error_rate(preds, truth):
    """Edit distance between the collapsed movement strings, normalized by
    the true string's length.  Insensitive to prediction delays that do not
    create or consume movements."""
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    if preds.size == 0 or truth.size == 0:
        raise ValueError("empty prediction or truth sequence")
    if preds.shape != truth.shape:
        raise ValueError("prediction/truth length mismatch")
    a = rle(preds)
    b = rle(truth)
    return levenshtein(a, b) / b.size


def prediction_delay(preds, truth, rate):
    """Mean time from each true label change to the first correct prediction
    inside the new segment.

    Segments never predicted correctly are excluded from the mean and
    returned as ``missed``.  With no label changes the delay is undefined
    (NaN, 0 missed).
    """
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    if preds.shape != truth.shape:
        raise ValueError("prediction/truth length mismatch")
    changes = np.flatnonzero(truth[1:] != truth[:-1]) + 1
    if changes.size == 0:
        return float("nan"), 0
    bounds = np.append(changes, truth.size)
    delays = []
    missed = 0
    for s, e in zip(bounds[:-1], bounds[1:]):
        hit = np.flatnonzero(preds[s:e] == truth[s])
        if hit.size:
            delays.append(hit[0] / rate)
        else:
            missed += 1
    mean = float(np.mean(delays)) if delays else float("nan")
    return mean, missed


def segments_from_labels(labels, trials):
    """(rest_start, grasp_start, grasp_end) index triples, one per trial
    that contains a rest run followed by a grasp run."""
    labels = np.asarray(labels)
    trials = np.asarray(trials)
    out = []
    if labels.size == 0:
        return out
    change = np.flatnonzero(trials[1:] != trials[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [labels.size]))
    for a, b in zip(starts, ends):
        seg = labels[a:b]
        grasp_at = np.flatnonzero(seg > 0)
        if grasp_at.size == 0 or grasp_at[0] == 0:
            continue
        gs = a + grasp_at[0]
        run = np.flatnonzero(np.diff(seg[grasp_at[0]:]) != 0)
        ge = b if run.size == 0 else gs + run[0] + 1
        out.append((a, gs, ge))
    return out


def _phase_segment_errors(preds, truth, segments, bins):
    """[n_segments, bins] per-bin error fractions; NaN where a segment has no
    samples in a bin.  Zero-duration phases skip the segment with a warning."""
    rows = []
    wrong = np.asarray(preds) != np.asarray(truth)
    for rs, gs, ge in segments:
        if gs <= rs or ge <= gs:
            warnings.warn(f"segment ({rs}, {gs}, {ge}) has a zero-duration phase")
            continue
        row = np.full(bins, np.nan)
        idx = np.arange(rs, ge)
        phase = np.where(
            idx < gs,
            (idx - gs) / (gs - rs),
            (idx - gs) / (ge - gs),
        )
        which = np.clip(((phase + 1.0) / 2.0 * bins).astype(np.int64), 0, bins - 1)
        for bn in range(bins):
            m = which == bn
            if m.any():
                row[bn] = float(np.mean(wrong[idx[m]]))
        rows.append(row)
    return np.array(rows) if rows else np.empty((0, bins))


def phase_normalized_error(preds, truth, segments, bins=50):
    """Misclassification fraction per normalized-phase bin over [-1, +1]
    (rest mapped to [-1, 0], the following grasp to [0, +1]), averaged over
    segments."""
    rows = _phase_segment_errors(preds, truth, segments, bins)
    if rows.size == 0:
        return np.full(bins, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(rows, axis=0)


def confusion_matrix(preds, truth, n_classes):
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise ValueError("prediction/truth length mismatch")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, preds), 1)
    return cm


def _row_normalize(cm):
    cm = np.asarray(cm, dtype=np.float64)
    sums = cm.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(sums > 0, cm / sums, 0.0)
    return out


def confusion_delta(cm_a, cm_b):
    """Row-normalized difference normalized(cm_a) - normalized(cm_b)."""
    cm_a = np.asarray(cm_a)
    cm_b = np.asarray(cm_b)
    if cm_a.shape != cm_b.shape:
        raise ValueError("confusion matrices differ in shape")
    return _row_normalize(cm_a) - _row_normalize(cm_b)


@dataclass
class EvalReport:
    """Aggregated cross-validated evaluation of one cue."""

    cue: str
    accuracy: float
    fold_accuracies: list
    confusion: np.ndarray
    k_sweep: list
    mer: dict                  # k -> mean MER over folds
    delay: dict                # k -> mean delay (s) over folds
    missed: dict               # k -> total never-matched segments
    phase_curve: np.ndarray    # [bins]
    phase_bins: int
    chosen: list               # per-fold hyperparameters
    n_classes: int
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "cue": self.cue,
            "accuracy": self.accuracy,
            "fold_accuracies": list(map(float, self.fold_accuracies)),
            "confusion": np.asarray(self.confusion).tolist(),
            "k_sweep": list(map(int, self.k_sweep)),
            "mer": {str(k): float(v) for k, v in self.mer.items()},
            "delay": {str(k): float(v) for k, v in self.delay.items()},
            "missed": {str(k): int(v) for k, v in self.missed.items()},
            "phase_curve": [float(v) for v in self.phase_curve],
            "phase_bins": int(self.phase_bins),
            "chosen": self.chosen,
            "n_classes": int(self.n_classes),
            "extras": self.extras,
        }

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(
            cue=d["cue"],
            accuracy=float(d["accuracy"]),
            fold_accuracies=d["fold_accuracies"],
            confusion=np.asarray(d["confusion"]),
            k_sweep=d["k_sweep"],
            mer={int(k): v for k, v in d["mer"].items()},
            delay={int(k): v for k, v in d["delay"].items()},
            missed={int(k): v for k, v in d["missed"].items()},
            phase_curve=np.asarray(d["phase_curve"]),
            phase_bins=int(d["phase_bins"]),
            chosen=d["chosen"],
            n_classes=int(d["n_classes"]),
            extras=d.get("extras", {}),
        )

    @classmethod
    def load_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _predict_blocks(train_ds, test_ds, cfg, model):
    preds = np.empty(len(test_ds), dtype=np.int64)
    for a in range(0, len(test_ds), PREDICT_BLOCK):
        blk = test_ds.select(np.arange(a, min(a + PREDICT_BLOCK, len(test_ds))))
        G = gram(blk, train_ds, cfg)
        _, p = krls.predict(model, G)
        preds[a:a + len(blk)] = p
    return preds


def run_experiment(ds: MulticueDataset, grid: GridSpec, cue,
                   train_factor=10, hyper_factor=40,
                   k_sweep=DEFAULT_K_SWEEP, phase_bins=50,
                   rate=None, log=None) -> EvalReport:
    """Full repetition-wise protocol for one cue.

    Per split: grid-search on the (further subsampled) training portion,
    train on the training portion, predict the held-out repetition at the
    dataset's own stride, then aggregate metrics over splits.  ``baseline``
    skips learning and always predicts rest (class 0).

    ``ds`` is the dataset at the prediction stride; training uses every
    ``train_factor``-th row of the global grid, hyperparameter search every
    ``hyper_factor``-th.
    """
    if cue not in ("emg", "cnn", "emg+cnn", "baseline"):
        raise ValueError(f"unknown cue {cue!r}")
    if rate is None:
        rate = ds.meta.get("rate", 2000.0) / ds.meta.get("stride", 1)
    n_classes = int(ds.classes.max()) + 1
    n_reps = int(np.unique(ds.reps).size)
    splits = cv_splits(ds, n_reps)
    pos = np.arange(len(ds))

    t_start = time.monotonic()
    fold_acc = []
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    chosen = []
    fold_seqs = []
    for i, (train_all, test_idx) in enumerate(splits):
        test_ds = ds.select(test_idx)
        truth = test_ds.labels
        if cue == "baseline":
            preds = np.zeros(len(test_ds), dtype=np.int64)
            chosen.append({"cue": cue})
        else:
            cue_grid = grid.for_cue(cue)
            train_mask = ds.reps != i
            hyper_idx = pos[(pos % hyper_factor == 0) & train_mask]
            train_idx = pos[(pos % train_factor == 0) & train_mask]
            cfg, lam = grid_search(ds.select(hyper_idx), cue_grid, n_classes)
            train_ds = ds.select(train_idx)
            G = gram(train_ds, train_ds, cfg)
            model = krls.train(G, train_ds.labels, lam, n_classes)
            preds = _predict_blocks(train_ds, test_ds, cfg, model)
            chosen.append({
                "gamma_chi2": cfg.gamma_chi2, "gamma_rbf": cfg.gamma_rbf,
                "w_emg": cfg.w_emg, "w_cnn": cfg.w_cnn, "lambda": lam,
            })
        fold_acc.append(accuracy(preds, truth))
        confusion += confusion_matrix(preds, truth, n_classes)
        fold_seqs.append((preds, truth, test_ds.trials))
        if log:
            log(f"fold {i}: acc={fold_acc[-1]:.4f} ({cue})")

    mer = {}
    delay = {}
    missed = {}
    for k in k_sweep:
        mers = []
        delays = []
        miss = 0
        for preds, truth, _ in fold_seqs:
            mv = majority_vote(preds, k)
            mers.append(movement_error_rate(mv, truth))
            d, m = prediction_delay(mv, truth, rate)
            if np.isfinite(d):
                delays.append(d)
            miss += m
        mer[int(k)] = float(np.mean(mers))
        delay[int(k)] = float(np.mean(delays)) if delays else float("nan")
        missed[int(k)] = int(miss)

    rows = []
    for preds, truth, trials in fold_seqs:
        segs = segments_from_labels(truth, trials)
        rows.append(_phase_segment_errors(preds, truth, segs, phase_bins))
    all_rows = np.concatenate([r for r in rows if r.size], axis=0) \
        if any(r.size for r in rows) else np.empty((0, phase_bins))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        phase_curve = (np.nanmean(all_rows, axis=0) if all_rows.size
                       else np.full(phase_bins, np.nan))

    return EvalReport(
        cue=cue,
        accuracy=float(np.mean(fold_acc)),
        fold_accuracies=fold_acc,
        confusion=confusion,
        k_sweep=list(k_sweep),
        mer=mer,
        delay=delay,
        missed=missed,
        phase_curve=phase_curve,
        phase_bins=phase_bins,
        chosen=chosen,
        n_classes=n_classes,
        extras={"runtime_s": time.monotonic() - t_start,
                "rest_prevalence": float(np.mean(ds.labels == 0))},
    )
