"""Figure rendering for run directories.

Re-reads the delimited outputs the other commands produced and writes one
PNG per table it recognizes.  Purely a viewing convenience: nothing here
feeds back into any computation.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _read_table(path):
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        rows = [line.split() for line in fh if line.strip()]
    cols = {name: np.array([float(r[i]) for r in rows]) for i, name in enumerate(header)}
    return cols


def _save(fig, path, written):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)


def render_all(run_dir: str) -> list[str]:
    written: list[str] = []

    epochs_path = os.path.join(run_dir, "epochs.txt")
    if os.path.exists(epochs_path):
        t = _read_table(epochs_path)
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
        ax1.plot(t["epoch"], t["acc"], marker="o")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("target accuracy")
        ax2.plot(t["epoch"], t["omega"], marker="s", color="tab:orange")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("mean foreground rate")
        _save(fig, os.path.join(run_dir, "fig_training.png"), written)

    sweep_path = os.path.join(run_dir, "sweep_accuracy.txt")
    if os.path.exists(sweep_path):
        t = _read_table(sweep_path)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.errorbar(t["beta"], t["acc_mean"], yerr=t["acc_std"], marker="o", capsize=3)
        ax.set_xlabel("box threshold")
        ax.set_ylabel("mean target accuracy")
        _save(fig, os.path.join(run_dir, "fig_beta_sensitivity.png"), written)

    robust_path = os.path.join(run_dir, "robustness.txt")
    if os.path.exists(robust_path):
        t = _read_table(robust_path)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(t["gamma"], t["acc_pcam"], marker="o", label="full method")
        ax.plot(t["gamma"], t["acc_baseline"], marker="s", label="baseline")
        ax.set_xlabel("retained pseudo-label accuracy")
        ax.set_ylabel("mean target accuracy")
        ax.invert_xaxis()
        ax.legend()
        _save(fig, os.path.join(run_dir, "fig_noise_robustness.png"), written)

    ablate_path = os.path.join(run_dir, "ablate.txt")
    if os.path.exists(ablate_path):
        t = _read_table(ablate_path)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.errorbar(t["pf_weight"], t["acc_mean"], yerr=np.sqrt(t["acc_var"]),
                    marker="o", capsize=3)
        ax.set_xscale("log")
        ax.set_xlabel("concentration-loss weight")
        ax.set_ylabel("mean target accuracy")
        _save(fig, os.path.join(run_dir, "fig_ablation.png"), written)

    eval_path = os.path.join(run_dir, "eval.txt")
    if os.path.exists(eval_path):
        rows = {}
        with open(eval_path, "r", encoding="ascii") as fh:
            for line in fh:
                parts = line.split()
                rows[parts[0]] = [float(v) for v in parts[1:]]
        if "ratio_gap" in rows and "per_class_acc" in rows:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            gaps = np.array(rows["ratio_gap"])
            accs = np.array(rows["per_class_acc"])
            ax.scatter(gaps, accs)
            for k, (x, y) in enumerate(zip(gaps, accs)):
                ax.annotate(str(k), (x, y), textcoords="offset points", xytext=(4, 4))
            ax.set_xlabel("per-class foreground-ratio gap")
            ax.set_ylabel("per-class target accuracy")
            _save(fig, os.path.join(run_dir, "fig_fom.png"), written)

    return written
