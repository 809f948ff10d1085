"""Render evaluation reports to figures and flat CSV tables.

The eval stage emits JSON; this module turns one or more cue reports into
PNG figures (accuracy bars, chosen kernel weights, phase-normalized error
curves, MER/delay trade-off, confusion-matrix difference) with the backing
numbers written as CSVs next to them, so plots can be regenerated or
restyled without rerunning the evaluation.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import EvalReport, confusion_delta

CUE_COLORS = {
    "baseline": "0.6",
    "cnn": "tab:green",
    "emg": "tab:blue",
    "emg+cnn": "tab:red",
}


def _color(cue):
    return CUE_COLORS.get(cue, "tab:purple")


def write_tables(reports, outdir):
    """CSV exports: accuracy, chosen weights, phase curve, MER/delay sweep."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    with open(outdir / "accuracy.csv", "w") as f:
        f.write("cue,fold,accuracy\n")
        for r in reports:
            for i, a in enumerate(r.fold_accuracies):
                f.write(f"{r.cue},{i},{a!r}\n")
            f.write(f"{r.cue},mean,{r.accuracy!r}\n")

    with open(outdir / "weights.csv", "w") as f:
        f.write("cue,fold,w_emg,w_cnn,gamma_chi2,gamma_rbf,lambda\n")
        for r in reports:
            for i, c in enumerate(r.chosen):
                if "w_emg" not in c:
                    continue
                f.write(
                    f"{r.cue},{i},{c['w_emg']!r},{c['w_cnn']!r},"
                    f"{c['gamma_chi2']!r},{c['gamma_rbf']!r},{c['lambda']!r}\n"
                )

    with open(outdir / "phase_curve.csv", "w") as f:
        f.write("phase," + ",".join(r.cue for r in reports) + "\n")
        bins = reports[0].phase_bins
        centers = np.linspace(-1, 1, bins, endpoint=False) + 1.0 / bins
        for i, c in enumerate(centers):
            row = [f"{c!r}"] + [f"{r.phase_curve[i]!r}" for r in reports]
            f.write(",".join(row) + "\n")

    with open(outdir / "mer_delay.csv", "w") as f:
        f.write("cue,k,mer,delay_s,missed\n")
        for r in reports:
            for k in r.k_sweep:
                f.write(f"{r.cue},{k},{r.mer[k]!r},{r.delay[k]!r},{r.missed[k]}\n")

    for r in reports:
        np.savetxt(outdir / f"confusion_{r.cue.replace('+', '_')}.csv",
                   r.confusion, fmt="%d", delimiter=",")


def render_figures(reports, outdir, dpi=150):
    """Write the standard PNG figures for a list of cue reports."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    by_cue = {r.cue: r for r in reports}

    # accuracy bars
    fig, ax = plt.subplots(figsize=(5, 3.2))
    cues = [r.cue for r in reports]
    accs = [r.accuracy for r in reports]
    ax.bar(range(len(cues)), accs, color=[_color(c) for c in cues], width=0.6)
    for i, r in enumerate(reports):
        ax.scatter([i] * len(r.fold_accuracies), r.fold_accuracies,
                   color="k", s=8, zorder=3)
    ax.set_xticks(range(len(cues)))
    ax.set_xticklabels(cues)
    ax.set_ylabel("classification accuracy")
    ax.set_ylim(0, 1)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(outdir / "accuracy.png", dpi=dpi)
    plt.close(fig)

    # chosen kernel weights (multicue runs only)
    weighted = [r for r in reports if any("w_emg" in c for c in r.chosen)]
    if weighted:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for j, r in enumerate(weighted):
            we = [c["w_emg"] for c in r.chosen if "w_emg" in c]
            wc = [c["w_cnn"] for c in r.chosen if "w_cnn" in c]
            ax.bar([j - 0.15], [np.mean(we)], width=0.3, color="tab:blue",
                   label="EMG weight" if j == 0 else None)
            ax.bar([j + 0.15], [np.mean(wc)], width=0.3, color="tab:green",
                   label="visual weight" if j == 0 else None)
        ax.set_xticks(range(len(weighted)))
        ax.set_xticklabels([r.cue for r in weighted])
        ax.set_ylabel("mean selected kernel weight")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        ax.grid(axis="y", alpha=0.3)
        fig.tight_layout()
        fig.savefig(outdir / "kernel_weights.png", dpi=dpi)
        plt.close(fig)

    # phase-normalized error
    fig, ax = plt.subplots(figsize=(6, 3.2))
    bins = reports[0].phase_bins
    centers = np.linspace(-1, 1, bins, endpoint=False) + 1.0 / bins
    for r in reports:
        ax.plot(centers, r.phase_curve, label=r.cue, color=_color(r.cue))
    ax.axvline(0.0, color="k", lw=0.8, alpha=0.5)
    ax.set_xlabel("normalized phase (rest [-1,0], grasp [0,1])")
    ax.set_ylabel("prediction error")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(outdir / "phase_error.png", dpi=dpi)
    plt.close(fig)

    # MER / delay vs majority-vote window
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for r in reports:
        ks = r.k_sweep
        axes[0].plot(ks, [r.mer[k] for k in ks], "o-", ms=3,
                     label=r.cue, color=_color(r.cue))
        axes[1].plot(ks, [r.delay[k] for k in ks], "o-", ms=3,
                     label=r.cue, color=_color(r.cue))
    for ax, ylab in zip(axes, ("movement error rate", "prediction delay [s]")):
        ax.set_xscale("log")
        ax.set_xlabel("majority vote window k")
        ax.set_ylabel(ylab)
        ax.grid(alpha=0.3, which="both")
    axes[0].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(outdir / "mer_delay.png", dpi=dpi)
    plt.close(fig)

    # confusion difference: multicue minus EMG-only, when both are present
    if "emg+cnn" in by_cue and "emg" in by_cue:
        delta = confusion_delta(by_cue["emg+cnn"].confusion, by_cue["emg"].confusion)
        lim = np.abs(delta).max() or 1.0
        fig, ax = plt.subplots(figsize=(4.6, 4))
        im = ax.imshow(delta, cmap="RdBu_r", vmin=-lim, vmax=lim)
        ax.set_xlabel("predicted class")
        ax.set_ylabel("true class")
        fig.colorbar(im, ax=ax, label="row-normalized difference")
        fig.tight_layout()
        fig.savefig(outdir / "confusion_delta.png", dpi=dpi)
        plt.close(fig)
        np.savetxt(outdir / "confusion_delta.csv", delta, delimiter=",")


def render_report(reports, outdir, dpi=150):
    """Figures plus their CSV tables in one call."""
    write_tables(reports, outdir)
    render_figures(reports, outdir, dpi=dpi)
