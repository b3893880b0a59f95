"""Run manifests, delimited report files, and figure rendering.

Every CLI command writes exactly one ``manifest.json`` into its output
directory (resolved config snapshot, seed, package version, timestamps).
Report-producing commands emit tab-separated tables next to PNG figures
rendered with the Agg backend.
"""
from __future__ import annotations

import csv
import datetime
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import __version__  # noqa: E402
from .errors import MdstError  # noqa: E402

MANIFEST_NAME = "manifest.json"


def ensure_outdir(path: str | Path, overwrite: bool = False) -> Path:
    """Create the output directory; refuse to reuse a non-empty one unless
    --overwrite was given."""
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise MdstError(
            f"output directory {out} is not empty; pass --overwrite to reuse it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out_dir: str | Path, command: str, config: dict,
                   seed: int | None, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "out_dir": str(out_dir),
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2))
    return path


def write_tsv(path: str | Path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def aligned_table(header: list[str], rows: list[list]) -> str:
    cells = [[str(c) for c in row] for row in rows]
    widths = [max(len(header[i]), *(len(r[i]) for r in cells)) if cells
              else len(header[i]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def fig_training_curves(log_rows: list[dict], path: str | Path) -> Path:
    steps = [r["step"] for r in log_rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(steps, [r["loss"] for r in log_rows], lw=0.8)
    ax1.set_ylabel("batch loss")
    ax1.set_title("training loss")
    ax2.plot(steps, [r["lr"] for r in log_rows], color="tab:orange")
    ax2.set_ylabel("learning rate")
    ax2.set_xlabel("step")
    ax2.set_title("learning-rate schedule")
    return _save(fig, path)


def fig_rank_histogram(ranks: list[int], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(ranks, bins=range(1, max(ranks) + 2), edgecolor="black")
    ax.set_xlabel("ground-truth rank")
    ax.set_ylabel("rounds")
    ax.set_title("ground-truth rank distribution")
    return _save(fig, path)


def fig_jacc_per_round(breakdown: list[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([b["round"] for b in breakdown],
            [100.0 * b["accuracy"] for b in breakdown], marker="o")
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title("answer accuracy per round")
    return _save(fig, path)


def fig_answer_lengths(lengths: list[int], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(lengths, bins=range(0, max(lengths) + 2), edgecolor="black")
    ax.set_xlabel("content tokens")
    ax.set_ylabel("answers")
    ax.set_title("generated answer lengths")
    return _save(fig, path)


def fig_ablation(rows: list[dict], path: str | Path) -> Path:
    """Bar chart of JACC per variant."""
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [r["variant"] for r in rows]
    ax.bar(names, [r["jacc"] for r in rows], color="tab:blue")
    ax.set_ylabel("JACC (%)")
    ax.set_title("ablation comparison")
    ax.tick_params(axis="x", rotation=20)
    return _save(fig, path)


def fig_state_heatmap(matrix, tokens: list[str], row_labels: list[str],
                      path: str | Path, title: str = "") -> Path:
    """Heatmap of an assignment distribution (tokens x state rows)."""
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(row_labels)),
                                    max(3, 0.3 * len(tokens))))
    im = ax.imshow(matrix, aspect="auto", cmap="viridis", vmin=0.0)
    ax.set_xticks(range(len(row_labels)), row_labels, rotation=45, ha="right")
    ax.set_yticks(range(len(tokens)), tokens)
    fig.colorbar(im, ax=ax, shrink=0.8)
    if title:
        ax.set_title(title)
    return _save(fig, path)
