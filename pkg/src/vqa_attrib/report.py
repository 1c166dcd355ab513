"""Delimited tables and static figures for evaluation output."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .data import PosTag  # noqa: E402
from .evaluation import CorrelationSummary, EvalReport, PosStat  # noqa: E402

# byte-stable SVG output
matplotlib.rcParams["svg.hashsalt"] = "vqa-attrib"
matplotlib.rcParams["svg.fonttype"] = "none"
SVG_METADATA = {"Date": None, "Creator": None}

CORRELATION_FIELDS = ["method", "mean", "se", "n", "degenerate_count"]
POS_FIELDS = ["tag", "probability", "count", "most_important"]


def _csv_text(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    w.writerows(rows)
    return buf.getvalue()


def correlation_csv(summaries: dict[str, CorrelationSummary]) -> str:
    return _csv_text(CORRELATION_FIELDS, [
        [s.method, repr(s.mean), repr(s.se), s.n, s.degenerate_count] for s in summaries.values()])


def pos_csv(hist: dict[PosTag, PosStat]) -> str:
    return _csv_text(POS_FIELDS, [
        [t.value, repr(s.probability), s.count, s.most_important] for t, s in hist.items()])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def pos_histogram_figure(hist: dict[PosTag, PosStat], path, title: str = "") -> None:
    """Bar chart of P(most important | tag), tags in frequency order."""
    tags = [t.value for t in hist]
    probs = [s.probability for s in hist.values()]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(tags)), probs, color="#4c72b0")
    ax.set_xticks(range(len(tags)))
    ax.set_xticklabels(tags, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("P(most important | tag)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def correlation_figure(summaries: dict[str, CorrelationSummary], path) -> None:
    names = list(summaries)
    means = [summaries[m].mean for m in names]
    errs = [summaries[m].se for m in names]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar(range(len(names)), means, yerr=errs, capsize=4, color="#55a868")
    ax.axhline(0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names)
    ax.set_ylabel("mean rank correlation")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def write_report(report: EvalReport, out_dir) -> list[Path]:
    """Write every evaluation artifact; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str) -> None:
        p = out / name
        p.write_text(text, encoding="utf-8", newline="\n")
        written.append(p)

    put("correlations.csv", correlation_csv(report.correlations))
    put("pos_histogram.csv", pos_csv(report.pos_histogram))
    put("flip_predictor.json", json.dumps(report.to_dict()["flip_predictor"], indent=2, sort_keys=True) + "\n")
    put("eval_report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if report.pos_histogram:
        pos_histogram_figure(report.pos_histogram, out / "pos_histogram.svg",
                             title=f"most important word ({report.pos_method})")
        written.append(out / "pos_histogram.svg")
    if report.correlations:
        correlation_figure(report.correlations, out / "correlations.svg")
        written.append(out / "correlations.svg")
    return written


def _fmt(v, spec=".3f") -> str:
    if v is None or v == "":
        return "-"
    try:
        f = float(v)
    except ValueError:
        return str(v)
    return format(f, spec) if math.isfinite(f) else str(v)


def summary_text(in_dir) -> str:
    """Human-readable tables from an evaluation output directory."""
    d = Path(in_dir)
    lines = []
    corr_path = d / "correlations.csv"
    if not corr_path.exists():
        raise FileNotFoundError(f"{corr_path} not found")
    lines.append("Rank correlation with reference maps")
    lines.append(f"  {'method':<12}{'mean':>9}{'se':>9}{'n':>7}{'degen':>7}")
    for row in read_csv(corr_path):
        lines.append(f"  {row['method']:<12}{_fmt(row['mean']):>9}{_fmt(row['se']):>9}"
                     f"{row['n']:>7}{row['degenerate_count']:>7}")
    pos_path = d / "pos_histogram.csv"
    if pos_path.exists():
        lines.append("")
        lines.append("P(most important word | POS tag)")
        lines.append(f"  {'tag':<12}{'prob':>9}{'count':>8}{'top':>7}")
        for row in read_csv(pos_path):
            lines.append(f"  {row['tag']:<12}{_fmt(row['probability']):>9}{row['count']:>8}{row['most_important']:>7}")
    flip_path = d / "flip_predictor.json"
    if flip_path.exists():
        flip = json.loads(flip_path.read_text(encoding="utf-8"))
        if flip:
            lines.append("")
            lines.append("Failure prediction from answer flips")
            lines.append(f"  threshold {_fmt(flip['threshold'], '.4f')}  "
                         f"accuracy {_fmt(flip['accuracy'])}  baseline {_fmt(flip['baseline_accuracy'])}  "
                         f"(fit on {flip['n_train']}, scored on {flip['n_eval']})")
    return "\n".join(lines) + "\n"
