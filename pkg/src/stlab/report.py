"""Evaluation reports: a TSV table, a plain-text summary, and a matplotlib
bar-chart figure rendered next to them."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .infer import BleuResult  # noqa: E402


@dataclass
class ReportRow:
    system: str
    bleu: BleuResult


def write_bleu_report(rows: list, out_dir, stem: str = "report") -> dict:
    """Write <stem>.tsv, <stem>.txt and <stem>.png; returns their paths.
    Text outputs are deterministic byte-for-byte for identical inputs."""
    if not rows:
        raise ValueError("no report rows")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {kind: out_dir / f"{stem}.{kind}" for kind in ("tsv", "txt", "png")}

    header = ["system", "bleu", "p1", "p2", "p3", "p4",
              "brevity_penalty", "hyp_len", "ref_len"]
    lines = ["\t".join(header)]
    for r in rows:
        b = r.bleu
        lines.append("\t".join([
            r.system, f"{b.score:.2f}",
            *(f"{p:.4f}" for p in b.precisions),
            f"{b.brevity_penalty:.4f}", str(b.hyp_len), str(b.ref_len)]))
    paths["tsv"].write_text("\n".join(lines) + "\n", encoding="utf-8")

    width = max(len(r.system) for r in rows)
    txt = [f"{'system'.ljust(width)}  BLEU", f"{'-' * width}  -----"]
    for r in rows:
        txt.append(f"{r.system.ljust(width)}  {r.bleu.score:6.2f}")
    paths["txt"].write_text("\n".join(txt) + "\n", encoding="utf-8")

    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [r.system for r in rows]
    scores = [r.bleu.score for r in rows]
    ax.bar(range(len(rows)), scores, color="#4878a8")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("BLEU")
    ax.set_ylim(0, max(100.0, max(scores) * 1.1))
    for i, s in enumerate(scores):
        ax.text(i, s, f"{s:.1f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(paths["png"], dpi=100)
    plt.close(fig)
    return paths
