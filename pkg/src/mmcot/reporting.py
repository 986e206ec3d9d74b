"""Markdown score tables and PNG trace grids, byte-stable given equal inputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from . import world
from .ablation import AblationTable
from .codec import Codebook, decode_tokens
from .evaluation import EvalReport
from .traces import ThoughtTrace
from .world import CATEGORY_LABELS, GenevalCategory

_COLUMNS = [CATEGORY_LABELS[c] for c in GenevalCategory] + ["Overall"]


def _row(label: str, per_category: dict, overall) -> str:
    cells = [label]
    for cat in GenevalCategory:
        v = per_category.get(cat.value)
        cells.append(f"{v:.4f}" if v is not None else "--")
    cells.append(f"{overall:.4f}" if overall is not None else "--")
    return "| " + " | ".join(cells) + " |"


def _header(first: str) -> list[str]:
    head = [first] + _COLUMNS
    return [
        "| " + " | ".join(head) + " |",
        "|" + "|".join(["---"] * len(head)) + "|",
    ]


def eval_markdown(report: EvalReport, label: str = "model") -> str:
    lines = [f"# Evaluation ({report.mode} mode)", ""]
    if report.n_items == 0:
        lines.append("No prompts evaluated (empty suite).")
        return "\n".join(lines) + "\n"
    lines += _header("Model")
    if report.hypo_per_category is not None:
        lines.append(_row(f"{label} (visual hypo.)", report.hypo_per_category, report.hypo_overall))
        lines.append(_row(f"{label} (final)", report.per_category, report.overall))
    else:
        lines.append(_row(label, report.per_category, report.overall))
    lines.append("")
    lines.append(f"Prompts: {report.n_items}; ungrammatical generations: {report.ungrammatical}.")
    counts = ", ".join(f"{k}: {v}" for k, v in sorted(report.category_counts.items()))
    lines.append(f"Per-category prompt counts: {counts}.")
    if report.note:
        lines.append(f"Note: {report.note}.")
    lines.append(
        "Single-object categories are reported for completeness even where "
        "multi-object reasoning is the variable under test."
    )
    return "\n".join(lines) + "\n"


def ablation_markdown(table: AblationTable) -> str:
    lines = ["# Loss ablation", ""]
    lines += _header("Loss")
    for row in table.rows:
        label = row.label if row.error is None else f"{row.label} (error)"
        lines.append(_row(label, row.per_category, row.overall))
    lines.append("")
    lines.append(f"Seeds: {', '.join(str(s) for s in table.seeds)}.")
    lines.append("Values reported as-is; no directional claim is made at this scale.")
    return "\n".join(lines) + "\n"


def trace_grid_png(
    traces: Sequence[ThoughtTrace | None],
    codebook: Codebook,
    canvas_size: int,
    path,
    cell_px: int = 8,
) -> tuple[int, int]:
    """One row per trace, one column per image segment (subgoals, hypothesis,
    final); missing cells stay background. Returns (rows, cols)."""
    from PIL import Image

    rows = len(traces)
    blocks_per_trace = [
        [s.tokens for s in (t.segments if t else ()) if s.tokens is not None]
        for t in traces
    ]
    cols = max((len(b) for b in blocks_per_trace), default=0)
    if rows == 0 or cols == 0:
        Image.new("RGB", (1, 1), world.PALETTE_RGB[0]).save(path, format="PNG")
        return (rows, cols)
    g = canvas_size
    pad = 2
    tile = g * cell_px
    width = cols * tile + (cols + 1) * pad
    height = rows * tile + (rows + 1) * pad
    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    canvas[:] = (20, 20, 20)
    palette = np.array(world.PALETTE_RGB, dtype=np.uint8)
    for r, blocks in enumerate(blocks_per_trace):
        for c, block in enumerate(blocks):
            grid, _ = decode_tokens(block, g, codebook)
            rgb = palette[grid.cells]
            rgb = np.repeat(np.repeat(rgb, cell_px, axis=0), cell_px, axis=1)
            y = pad + r * (tile + pad)
            x = pad + c * (tile + pad)
            canvas[y : y + tile, x : x + tile] = rgb
    Image.fromarray(canvas, mode="RGB").save(path, format="PNG")
    return (rows, cols)


def report(
    obj: EvalReport | AblationTable,
    out_dir,
    traces: Sequence[ThoughtTrace | None] | None = None,
    codebook: Codebook | None = None,
    canvas_size: int = world.DEFAULT_CANVAS,
    label: str = "model",
) -> Path:
    """Write report.md (plus the raw JSON and an image grid when traces are
    given) under out_dir; byte-stable for identical inputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, AblationTable):
        md = ablation_markdown(obj)
        (out_dir / "ablation.json").write_text(obj.to_json() + "\n")
    else:
        md = eval_markdown(obj, label=label)
        (out_dir / "eval_report.json").write_text(obj.to_json() + "\n")
    if traces is not None:
        if codebook is None:
            raise ValueError("codebook required to render trace images")
        grid_path = out_dir / "traces.png"
        rows, cols = trace_grid_png(traces, codebook, canvas_size, grid_path)
        md += f"\nTrace image grid: traces.png ({rows} traces x {cols} image slots).\n"
    path = out_dir / "report.md"
    path.write_text(md)
    return path
