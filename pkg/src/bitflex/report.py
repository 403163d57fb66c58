"""Delimited output and figure rendering.

Every CSV written here has a companion PNG rendered next to it, so a run
directory is inspectable without extra tooling. Figures use the Agg
backend (file output only).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .analysis import SweepResult  # noqa: E402

SWEEP_HEADER = ["k", "alpha", "rel_error"]
CLIP_PROFILE_HEADER = ["layer", "k", "alpha"]
VARIANCE_PROFILE_HEADER = ["layer", "k", "weight_std", "act_std"]
BUDGET_HEADER = ["k", "bitops", "weight_bytes", "total_bytes", "size_mib"]


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


def write_metrics_log(path, records: list[dict]) -> Path:
    """One JSON record per line (epoch, per-bit train/val accuracy, lr, loss)."""
    path = Path(path)
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def fig_sweep(result: SweepResult, path) -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for k in sorted(result.argmin):
        pts = result.errors_for(k)
        xs = [a for a, _ in pts]
        ys = [e for _, e in pts]
        (line,) = ax.plot(xs, ys, label=f"{k}-bit")
        a_star = result.argmin[k]
        e_star = min(e for a, e in pts)
        ax.plot([a_star], [e_star], "o", color=line.get_color(), ms=6)
    ax.set_xscale("log")
    ax.set_xlabel("clipping level α")
    ax.set_ylabel("relative error")
    ax.set_title("Clipping-quantization error vs clipping level")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def fig_clip_profile(rows: list[tuple[str, int, float]], path) -> Path:
    """rows: (layer, k, alpha)."""
    layers = list(dict.fromkeys(r[0] for r in rows))
    bits = sorted({r[1] for r in rows}, reverse=True)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for k in bits:
        ys = [next(a for l, kk, a in rows if l == layer and kk == k) for layer in layers]
        ax.plot(range(len(layers)), ys, marker="o", label=f"{k}-bit")
    ax.set_xticks(range(len(layers)), layers, rotation=30)
    ax.set_ylabel("clipping level α")
    ax.set_title("Per-layer clipping levels")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def fig_variance_profile(rows: list[tuple[str, int, float, float]], path) -> Path:
    """rows: (layer, k, weight_std, act_std), possibly at several k."""
    layers = list(dict.fromkeys(r[0] for r in rows))
    bits = sorted({r[1] for r in rows}, reverse=True)
    fig, (ax_w, ax_a) = plt.subplots(1, 2, figsize=(9.6, 4.2))
    for k in bits:
        ws = [next(w for l, kk, w, _ in rows if l == layer and kk == k) for layer in layers]
        as_ = [next(a for l, kk, _, a in rows if l == layer and kk == k) for layer in layers]
        ax_w.plot(range(len(layers)), ws, marker="o", label=f"{k}-bit")
        ax_a.plot(range(len(layers)), as_, marker="o", label=f"{k}-bit")
    for ax, title in ((ax_w, "quantized weight std"), (ax_a, "activation std")):
        ax.set_xticks(range(len(layers)), layers, rotation=30)
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def fig_budget(rows: list[tuple], path) -> Path:
    """rows: (k, bitops, weight_bytes, total_bytes, size_mib)."""
    ks = [str(r[0]) for r in rows]
    bitops = [float(r[1]) / 1e9 for r in rows]
    mib = [float(r[4]) for r in rows]
    fig, (ax_o, ax_s) = plt.subplots(1, 2, figsize=(9.6, 4.2))
    ax_o.bar(ks, bitops, color="tab:blue")
    ax_o.set_xlabel("bit-width")
    ax_o.set_ylabel("BitOPs (billions)")
    ax_s.bar(ks, mib, color="tab:orange")
    ax_s.set_xlabel("bit-width")
    ax_s.set_ylabel("model size (MiB)")
    for ax in (ax_o, ax_s):
        ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def fig_training(records: list[dict], path) -> Path:
    """Loss and per-bit validation accuracy across epochs."""
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(9.6, 4.2))
    epochs = list(range(len(records)))
    ax_l.plot(epochs, [r["loss"] for r in records], color="tab:red")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("training loss")
    ax_l.grid(True, alpha=0.3)
    bits = sorted({k for r in records for k in r.get("val_acc", {})}, reverse=True)
    for k in bits:
        ys = [r["val_acc"].get(k) for r in records]
        ax_a.plot(epochs, ys, marker=".", label=f"{k}-bit")
    if bits:
        ax_a.legend()
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("val accuracy (%)")
    ax_a.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
