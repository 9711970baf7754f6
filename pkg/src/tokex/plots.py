"""Matplotlib renderings of the evaluation outputs, written to files."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def plot_deletion_curves(curves: dict[str, np.ndarray], path: str) -> None:
    """Macro-F1 against the number of deleted tokens, one line per ranking
    source; the random baseline is dashed."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in curves.items():
        style = {"linestyle": "--", "color": "gray"} if name == "random" else {}
        ax.plot(np.arange(len(values)), values, label=name, **style)
    ax.set_xlabel("deleted tokens k")
    ax.set_ylabel("macro-F1")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_ssa_sweep(ssa_section: dict, path: str) -> None:
    """SSA against window length on top, mean neighborhood size below."""
    lengths = ssa_section["lengths"]
    fig, (ax_ssa, ax_nb) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    for method, entry in ssa_section["methods"].items():
        ssa_vals = [
            entry[str(length)]["mean_ssa"]["mean"]
            if entry[str(length)]["mean_ssa"] is not None else np.nan
            for length in lengths
        ]
        nb_vals = [entry[str(length)]["mean_neighbors"]["mean"]
                   for length in lengths]
        style = {"linestyle": "--", "color": "gray"} if method == "random" else {}
        ax_ssa.plot(lengths, ssa_vals, marker="o", label=method, **style)
        ax_nb.plot(lengths, nb_vals, marker="o", label=method, **style)
    ax_ssa.set_ylabel("mean SSA")
    ax_ssa.set_ylim(-0.02, 1.02)
    ax_ssa.legend()
    ax_ssa.grid(alpha=0.3)
    ax_nb.set_ylabel("mean neighbors")
    ax_nb.set_xlabel("subsequence length")
    ax_nb.set_xticks(list(lengths))
    ax_nb.grid(alpha=0.3)
    _save(fig, path)


def plot_invariance(invariance: dict, path: str) -> None:
    """Mean cosine similarity across seed-variant models, one bar per
    method, with std error bars."""
    methods = list(invariance)
    means = [invariance[m]["mean"] for m in methods]
    stds = [invariance[m]["std"] for m in methods]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(methods, means, yerr=stds, capsize=4, color="steelblue")
    ax.set_ylabel("mean cosine similarity across seeds")
    ax.set_ylim(0, 1.05)
    ax.grid(axis="y", alpha=0.3)
    _save(fig, path)


def plot_agreement(methods: list[str], matrix: np.ndarray, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    image = ax.imshow(matrix, vmin=-1.0, vmax=1.0, cmap="RdBu_r")
    ax.set_xticks(range(len(methods)), methods, rotation=45, ha="right")
    ax.set_yticks(range(len(methods)), methods)
    for i in range(len(methods)):
        for j in range(len(methods)):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center",
                    fontsize=8)
    fig.colorbar(image, ax=ax, label="mean cosine similarity")
    _save(fig, path)
