"""Figure rendering for the experiment reports.

Every CLI report writes a delimited table; these helpers render the same
rows to a PNG next to it.  Uses the Agg backend so headless runs work.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def counts_figure(rows: list[dict], path: str):
    sweep = [r for r in rows if r["section"] == "input_sweep"]
    ksweep = [r for r in rows if r["section"] == "kernel_sweep"]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    for ax, data, xkey, xlabel in (
        (axes[0], sweep, "height", "input side (5x5 kernel)"),
        (axes[1], ksweep, "kernel", "kernel side (64x64 input)"),
    ):
        xs = [r[xkey] for r in data]
        idx = range(len(xs))
        w = 0.38
        ax.bar([i - w / 2 for i in idx], [r["baseline_mults"] for r in data], w,
               label="baseline", color="#b24040")
        ax.bar([i + w / 2 for i in idx], [r["correlated_mults"] for r in data], w,
               label="correlated", color="#3d6fb4")
        ax.set_xticks(list(idx), [str(x) for x in xs])
        ax.set_xlabel(xlabel)
        ax.set_ylabel("polynomial multiplications")
        ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def bench_figure(rows: list[dict], path: str):
    fig, ax = plt.subplots(figsize=(6.5, 3.4))
    ops = [r["op"] for r in rows]
    med = [r["median_ms"] for r in rows]
    ax.bar(ops, med, color="#3d6fb4")
    ax.set_ylabel("median latency (ms)")
    ax.set_yscale("log")
    for i, v in enumerate(med):
        ax.text(i, v, f"{v:.2f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def ablate_figure(rows: list[dict], path: str):
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.4))
    names = [r["protocol"] for r in rows]
    axes[0].bar(names, [r["online_seconds"] for r in rows], color="#3d6fb4")
    axes[0].set_ylabel("online seconds")
    axes[1].bar(names, [r["bytes_online"] / 1e6 for r in rows], color="#b24040")
    axes[1].set_ylabel("online MB")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def breakdown_figure(rows: list[dict], path: str):
    protos = sorted({r["protocol"] for r in rows})
    kinds = []
    for r in rows:
        if r["kind"] not in kinds:
            kinds.append(r["kind"])
    fig, ax = plt.subplots(figsize=(7.5, 3.4))
    w = 0.8 / len(protos)
    for pi, proto in enumerate(protos):
        ys = []
        for kind in kinds:
            vals = [r["seconds"] for r in rows if r["protocol"] == proto and r["kind"] == kind]
            ys.append(sum(vals) / max(1, len(vals)))
        ax.bar([i + pi * w for i in range(len(kinds))], ys, w, label=proto)
    ax.set_xticks([i + w / 2 for i in range(len(kinds))], kinds)
    ax.set_ylabel("seconds per layer")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def train_figure(losses: list[float], path: str):
    fig, ax = plt.subplots(figsize=(6.5, 3.4))
    ax.plot(losses, lw=0.9, color="#3d6fb4")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
