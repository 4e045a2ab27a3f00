"""Report formatting: an aligned text table or machine-stable JSON.

Percentages print with two decimals in "JGA / F1" cells, matching the usual
way these scores are tabulated.
"""

from __future__ import annotations

import json

from .backends import CostLedger
from .metrics import MetricsReport


def _cell(jga: float, f1: float) -> str:
    return f"{100 * jga:.2f} / {100 * f1:.2f}"


def _metric_rows(rows: list[tuple[str, MetricsReport]]) -> list[str]:
    header = ("system", "DST JGA/F1", "TLB JGA/F1", "turns")
    table = [header] + [
        (name, _cell(r.dst_jga, r.dst_f1), _cell(r.tlb_jga, r.tlb_f1), str(r.turn_count))
        for name, r in rows
    ]
    widths = [max(len(row[col]) for row in table) for col in range(4)]
    lines = []
    for row in table:
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
    return lines


def format_report(final: MetricsReport | None, ledger: CostLedger | None = None,
                  style: str = "table", first: MetricsReport | None = None) -> str:
    """Render metric reports plus the cost summary.

    ``style`` is "table" for aligned text or "json" for stable-key JSON.
    """
    if style == "json":
        payload = {
            "first": first.to_dict() if first else None,
            "final": final.to_dict() if final else None,
            "cost": ledger.to_dict() if ledger else None,
        }
        return json.dumps(payload, sort_keys=True, indent=2)
    if style != "table":
        raise ValueError(f"style must be 'table' or 'json', got {style!r}")

    rows: list[tuple[str, MetricsReport]] = []
    if first is not None:
        rows.append(("first pass", first))
    if final is not None:
        rows.append(("corrected", final))
    if not rows:
        raise ValueError("nothing to report")
    sections = ["\n".join(_metric_rows(rows))]

    if final is not None and final.per_category:
        cat_rows = [(name, sub) for name, sub in sorted(final.per_category.items())]
        sections.append("category breakdown (corrected)\n" + "\n".join(_metric_rows(cat_rows)))

    if ledger is not None:
        cost = ledger.to_dict()
        lines = ["cost"]
        for backend_id, bucket in cost["backends"].items():
            lines.append(
                f"  {backend_id}: {int(bucket['calls'])} calls, "
                f"{int(bucket['prompt_tokens'])} prompt + "
                f"{int(bucket['completion_tokens'])} completion tokens, "
                f"{bucket['teraflops']:.6g} TeraFLOPs"
            )
        lines.append(f"  total: {cost['total_teraflops']:.6g} TeraFLOPs over {cost['total_calls']} calls")
        sections.append("\n".join(lines))

    return "\n\n".join(sections)
