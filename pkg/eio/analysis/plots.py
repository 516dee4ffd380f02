#!/usr/bin/env python3
"""
Static figures. Plots are drawn from the report frames written to CSV, so
every plotted point is a value in the CSV next to it. Each PNG carries the
config hash and seed of the run in its text metadata.
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from eio.analysis import accuracy_table


def _provenance(config_hash, seed):
    return {"config_hash": str(config_hash or ""), "seed": str(seed)}


def _frame_provenance(df):
    def joined(column):
        if column not in df.columns:
            return ""
        return ",".join(str(v) for v in sorted(df[column].fillna("").astype(str).unique()))
    return _provenance(joined("config_hash"), joined("seed"))


def _save(fig, path, metadata):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata=metadata)
    plt.close(fig)


def plot_accuracy_vs_eps(df, protocol, path):
    """Accuracy versus perturbation strength, one line per model."""
    table = accuracy_table(df, protocol)
    fig, ax = plt.subplots(figsize=(7, 5))
    for model_id, row in table.iterrows():
        ax.plot(row.index.values, row.values, marker="o", label=model_id)
    ax.set_xlabel("eps")
    ax.set_ylabel(f"{protocol} all-or-nothing accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(loc="upper right", fontsize="small")
    _save(fig, path, _frame_provenance(df[df.protocol == protocol]))
    return table


def plot_transfer_matrix(matrix, path):
    fig, ax = plt.subplots(figsize=(5, 5))
    image = ax.imshow(matrix.rates, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(matrix.model_ids)))
    ax.set_xticklabels(matrix.model_ids, rotation=45, ha="right")
    ax.set_yticks(range(len(matrix.model_ids)))
    ax.set_yticklabels(matrix.model_ids)
    ax.set_xlabel("target")
    ax.set_ylabel("source")
    ax.set_title(f"transfer success, eps={matrix.eps:g}")
    for i in range(matrix.rates.shape[0]):
        for j in range(matrix.rates.shape[1]):
            ax.text(j, i, f"{matrix.rates[i, j]:.2f}", ha="center", va="center",
                    color="w", fontsize="small")
    fig.colorbar(image, ax=ax, fraction=0.046)
    _save(fig, path, _provenance(matrix.config_hash, matrix.seed))
