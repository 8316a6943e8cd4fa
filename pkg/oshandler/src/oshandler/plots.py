"""Turn simulator compare-CSV tables and time-series CSVs into figures.

One figure per case study: walk latency vs fragmentation, scheme
head-to-head bars, THP behavior vs fragmentation, and the fault-cost
breakdown; plus an fmfi-over-events line for time-series inputs. Inputs are
never modified.
"""

from __future__ import annotations

import argparse
import csv
import os
import re
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class MissingColumn(Exception):
    def __init__(self, column: str):
        super().__init__(f"required column missing: {column}")
        self.column = column


def load_rows(path: str) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def need(row: dict, column: str) -> float:
    value = row.get(column)
    if value is None or value == "":
        raise MissingColumn(column)
    return float(value)


def label_of(row: dict) -> str:
    if "report" not in row:
        raise MissingColumn("report")
    return os.path.splitext(os.path.basename(row["report"]))[0]


def _sum_matching(row: dict, pattern: str) -> float:
    rx = re.compile(pattern)
    hits = [float(v) for k, v in row.items() if v not in (None, "") and rx.fullmatch(k)]
    if not hits:
        raise MissingColumn(pattern)
    return sum(hits)


def fig_walk_latency_vs_fragmentation(rows: list[dict]):
    xs, ys, labels = [], [], []
    for row in rows:
        walks = need(row, "walks.count")
        cycles = need(row, "walks.cycles")
        xs.append(need(row, "memmgr.fmfi_initial"))
        ys.append(cycles / walks if walks else 0.0)
        labels.append(label_of(row))
    fig, ax = plt.subplots(figsize=(6, 4))
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    ax.plot([xs[i] for i in order], [ys[i] for i in order], "o-")
    for i in order:
        ax.annotate(labels[i], (xs[i], ys[i]), fontsize=7,
                    textcoords="offset points", xytext=(4, 4))
    ax.set_xlabel("fmfi at run start")
    ax.set_ylabel("cycles per page-table walk")
    ax.set_title("walk latency vs fragmentation")
    fig.tight_layout()
    return fig


def fig_scheme_head_to_head(rows: list[dict]):
    labels = [label_of(r) for r in rows]
    metrics = {
        "cycles/access": [],
        "walks/access": [],
        "offset-path share": [],
    }
    for row in rows:
        mem = need(row, "events.mem") or 1.0
        metrics["cycles/access"].append(need(row, "total_cycles") / mem)
        metrics["walks/access"].append(need(row, "walks.count") / mem)
        offset = _sum_matching(row, r"paths\.(segment|range|restseg)")
        metrics["offset-path share"].append(offset / mem)
    fig, axes = plt.subplots(1, 3, figsize=(11, 4))
    for ax, (name, values) in zip(axes, metrics.items()):
        ax.bar(range(len(labels)), values)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_title(name, fontsize=9)
    fig.suptitle("translation schemes head-to-head")
    fig.tight_layout()
    return fig


def fig_thp_vs_fragmentation(rows: list[dict]):
    xs = [need(r, "memmgr.fmfi_initial") for r in rows]
    promotions = [need(r, "memmgr.promotions") for r in rows]
    share = []
    for row in rows:
        mem = need(row, "events.mem") or 1.0
        try:
            hits_2m = _sum_matching(row, r"tlb\.levels\..*\.hits\.2M")
        except MissingColumn:
            hits_2m = 0.0
        share.append(hits_2m / mem)
    labels = [label_of(r) for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    ax1.bar(range(len(order)), [promotions[i] for i in order])
    ax1.set_xticks(range(len(order)))
    ax1.set_xticklabels([f"{labels[i]}\nfmfi {xs[i]:.2f}" for i in order], fontsize=7)
    ax1.set_ylabel("huge-page promotions")
    ax2.bar(range(len(order)), [share[i] for i in order], color="tab:orange")
    ax2.set_xticks(range(len(order)))
    ax2.set_xticklabels([f"{labels[i]}\nfmfi {xs[i]:.2f}" for i in order], fontsize=7)
    ax2.set_ylabel("2M TLB hits per access")
    fig.suptitle("reservation-based THP across fragmentation levels")
    fig.tight_layout()
    return fig


def fig_fault_cost_breakdown(rows: list[dict]):
    labels = [label_of(r) for r in rows]
    handler = [need(r, "faults.handler_cycles") for r in rows]
    walk = [need(r, "walks.cycles") for r in rows]
    other = [
        max(0.0, need(r, "total_cycles") - h - w)
        for r, h, w in zip(rows, handler, walk)
    ]
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = range(len(labels))
    ax.bar(xs, handler, label="fault handler")
    ax.bar(xs, walk, bottom=handler, label="page-table walks")
    bottoms = [h + w for h, w in zip(handler, walk)]
    ax.bar(xs, other, bottom=bottoms, label="translation probes + data")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("cycles")
    ax.legend(fontsize=8)
    ax.set_title("cycle breakdown per run")
    fig.tight_layout()
    return fig


def fig_fmfi_timeseries(series: list[tuple[str, list[dict]]]):
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, rows in series:
        events = [need(r, "event") for r in rows]
        fmfi = [need(r, "fmfi") for r in rows]
        ax.plot(events, fmfi, label=name)
    ax.set_xlabel("events processed")
    ax.set_ylabel("fmfi")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    ax.set_title("fragmentation over time")
    fig.tight_layout()
    return fig


COMPARE_FIGURES = {
    "walk_latency_vs_fragmentation.png": fig_walk_latency_vs_fragmentation,
    "schemes_head_to_head.png": fig_scheme_head_to_head,
    "thp_vs_fragmentation.png": fig_thp_vs_fragmentation,
    "fault_cost_breakdown.png": fig_fault_cost_breakdown,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="vm-oshandler-plot",
                                     description="render case-study figures")
    parser.add_argument("--compare", action="append", default=[],
                        metavar="CSV", help="compare-table CSV (repeatable)")
    parser.add_argument("--timeseries", action="append", default=[],
                        metavar="CSV", help="time-series CSV (repeatable)")
    parser.add_argument("-o", "--outdir", required=True)
    args = parser.parse_args(argv)

    if not args.compare and not args.timeseries:
        print("vm-oshandler-plot: no input files given", file=sys.stderr)
        return 2

    rows: list[dict] = []
    for path in args.compare:
        rows.extend(load_rows(path))
    series = [(os.path.splitext(os.path.basename(p))[0], load_rows(p))
              for p in args.timeseries]

    written = []
    try:
        os.makedirs(args.outdir, exist_ok=True)
        if rows:
            for name, builder in COMPARE_FIGURES.items():
                fig = builder(rows)
                out = os.path.join(args.outdir, name)
                fig.savefig(out, dpi=120)
                plt.close(fig)
                written.append(out)
        if series:
            fig = fig_fmfi_timeseries(series)
            out = os.path.join(args.outdir, "fmfi_timeseries.png")
            fig.savefig(out, dpi=120)
            plt.close(fig)
            written.append(out)
    except MissingColumn as exc:
        print(f"vm-oshandler-plot: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
