"""Tables and machine-readable dumps for lists of :class:`EvalReport`."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .adapters import lora_param_formula, prefix_param_formula
from .evaluation import EvalReport

MEGA = 2 ** 20
METRIC_COLUMNS = ("bleu4", "rouge1", "rouge2", "rougeL")
HEADER = ("Model", "Total Parameters", "Trainable Parameters", "Trainable %",
          "Bleu-4", "Rouge-1", "Rouge-2", "Rouge-L")


def fmt_params(n: int) -> str:
    return "-" if not n else f"{n / MEGA:.2f}M"


def fmt_pct(x: float | None, digits: int = 2) -> str:
    return "-" if x is None else f"{100 * x:.{digits}f}%"


def fmt_ratio(x: float) -> str:
    # small ratios need more digits to say anything
    if not x:
        return "-"
    return fmt_pct(x, 4 if x < 1e-3 else 2)


def table_rows(reports: list[EvalReport]) -> list[tuple[str, ...]]:
    return [(r.model_label, fmt_params(r.total_params), fmt_params(r.trainable_params),
             fmt_ratio(r.trainable_ratio), *(fmt_pct(getattr(r, m)) for m in METRIC_COLUMNS))
            for r in reports]


def report_table(reports: list[EvalReport]) -> str:
    """Fixed-width text table: header plus one row per report."""
    if not reports:
        raise ValueError("no reports to tabulate")
    rows = [HEADER] + table_rows(reports)
    widths = [max(len(row[i]) for row in rows) for i in range(len(HEADER))]
    lines = []
    for k, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def reports_to_json(reports: list[EvalReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True) + "\n"


def reports_from_json(text: str) -> list[EvalReport]:
    data = json.loads(text)
    if isinstance(data, dict):
        data = [data]
    return [EvalReport.from_dict(d) for d in data]


def reports_to_tsv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    names = list(EvalReport.__dataclass_fields__)
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(names)
    for r in reports:
        w.writerow(["" if getattr(r, n) is None else getattr(r, n) for n in names])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# reference accounting at 6B scale
# ---------------------------------------------------------------------------

# ChatGLM2-6B: 28 layers, hidden 4096, fused qkv 4096 -> 4608 (multi-query),
# per-layer key/value width 512 in its prefix encoder.
GLM6B_TOTAL = 6_243_584_000
GLM6B_LAYERS = 28
GLM6B_HIDDEN = 4096
GLM6B_QKV_OUT = 4608
GLM6B_KV_WIDTH = 512


def glm6b_prefix_count(pre_seq_len: int = 128) -> int:
    # prefix_projection off: the table stores the key/value rows directly
    return prefix_param_formula(pre_seq_len, 0, 0, GLM6B_LAYERS, GLM6B_KV_WIDTH, projection=False)


def glm6b_lora_count(r: int = 8) -> int:
    return lora_param_formula(r, [(GLM6B_HIDDEN, GLM6B_QKV_OUT)] * GLM6B_LAYERS)


def accounting_reports(pre_seq_len: int = 128, r: int = 8) -> list[EvalReport]:
    """Parameter-only rows for base, prefix, LoRA and joint at 6B scale (metrics left empty)."""
    p, lo = glm6b_prefix_count(pre_seq_len), glm6b_lora_count(r)
    out = []
    for label, n in (("ChatGLM2-6B", 0), ("+ Prefix", p), ("+ LoRA", lo), ("+ Prefix + LoRA", p + lo)):
        total = GLM6B_TOTAL + n
        out.append(EvalReport(label, total, n, n / total, None, None, None, None, None, ""))
    return out


def write_bundle(reports: list[EvalReport], out_dir: str | Path, loss_logs: dict[str, list[float]] | None = None,
                 figures: bool = True) -> dict[str, Path]:
    """Write ``table.txt``, ``report.tsv``, ``report.json`` and PNG figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"table": out / "table.txt", "tsv": out / "report.tsv", "json": out / "report.json"}
    paths["table"].write_text(report_table(reports), encoding="utf-8")
    paths["tsv"].write_text(reports_to_tsv(reports), encoding="utf-8")
    paths["json"].write_text(reports_to_json(reports), encoding="utf-8")
    if figures:
        from . import plotting
        scored = [r for r in reports if r.bleu4 is not None]
        if scored:
            paths["metrics_png"] = plotting.metric_bars(scored, out / "metrics.png")
        paths["params_png"] = plotting.param_bars(reports, out / "params.png")
        if loss_logs:
            paths["loss_png"] = plotting.loss_curves(loss_logs, out / "loss.png")
    return paths
