"""Figure rendering for the CLI report path.

Figures are derived views of already-written CSVs: they read the delimited
output back and render PNGs next to it, so the CSV remains the canonical,
byte-reproducible boundary of every subcommand.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["render_report", "render_xy", "render_fit", "render_gap_norm"]


def _read_csv(path: Path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(r for r in fh if not r.startswith("#")):
            rows.append(row)
    return rows


def render_report(csv_path: Path, png_path: Path) -> None:
    rows = _read_csv(Path(csv_path))
    names = [r["name"] for r in rows]
    margins = []
    for r in rows:
        v, t = abs(float(r["value"])), abs(float(r["tolerance"]))
        if not (math.isfinite(v) and t > 0):
            margins.append(0.0)
        else:
            margins.append(math.log10(max(v, 1e-300) / t))
    colors = ["tab:green" if int(r["passed"]) else "tab:red" for r in rows]
    fig, ax = plt.subplots(figsize=(7, 0.32 * len(rows) + 1.2))
    ax.barh(range(len(rows)), margins, color=colors)
    ax.set_yticks(range(len(rows)), names, fontsize=7)
    ax.axvline(0.0, color="k", lw=0.8)
    ax.set_xlabel("log10(|value| / tolerance)")
    ax.set_title("verification margins (left of 0 = inside tolerance)")
    fig.tight_layout()
    fig.savefig(png_path, dpi=130)
    plt.close(fig)


def render_xy(csv_path: Path, png_path: Path, xcol: str, ycol: str,
              logy: bool = False) -> None:
    rows = _read_csv(Path(csv_path))
    x = [float(r[xcol]) for r in rows]
    y = [float(r[ycol]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x, y, "o-", ms=3)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xcol)
    ax.set_ylabel(ycol)
    fig.tight_layout()
    fig.savefig(png_path, dpi=130)
    plt.close(fig)


def render_gap_norm(csv_path: Path, png_path: Path) -> None:
    rows = _read_csv(Path(csv_path))
    gaps = [float(r["t"]) - float(r["s"]) for r in rows]
    norms = [float(r["norm"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(gaps, norms, "o", ms=3)
    ax.set_xlabel("t - s")
    ax.set_ylabel("||U(t,s)||")
    fig.tight_layout()
    fig.savefig(png_path, dpi=130)
    plt.close(fig)


def render_fit(csv_path: Path, png_path: Path, slope: float, intercept: float,
               mode: str) -> None:
    rows = _read_csv(Path(csv_path))
    gaps = [float(r["gap"]) for r in rows]
    norms = [float(r["norm"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    if mode == "small":
        ax.loglog(gaps, norms, "o", label="estimate")
        xs = gaps
        ys = [math.exp(intercept) * g ** slope for g in xs]
        label = f"fit slope {slope:.3f}"
    else:
        ax.semilogy(gaps, norms, "o", label="estimate")
        xs = gaps
        ys = [math.exp(intercept + slope * g) for g in xs]
        label = f"fit rate {slope:.3f}"
    ax.plot(xs, ys, "-", label=label)
    ax.set_xlabel("gap t - s")
    ax.set_ylabel("operator norm estimate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=130)
    plt.close(fig)
