from __future__ import annotations

from dataclasses import dataclass

from ..errors import ContractError
from ..metatrain import EvalReport


@dataclass
class Comparison:
    metric: str
    rows: list[dict]

    def to_dict(self) -> dict:
        return {"metric": self.metric, "rows": self.rows}

    def text(self) -> str:
        head = ("variant", "description", self.metric, "ci95", "tasks")
        body = [(r["variant"], r["description"], f"{r['mean']:.4f}", f"± {r['ci95']:.4f}", str(r["n_tasks"]))
                for r in self.rows]
        widths = [max(len(line[i]) for line in [head, *body]) for i in range(len(head))]
        fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        return "\n".join([fmt(head), fmt(tuple("-" * w for w in widths)), *map(fmt, body)]) + "\n"


def compare_report(reports: list[EvalReport], descriptions: dict[str, str] | None = None) -> Comparison:
    """Side-by-side mean ± ci95 for reports on the same metric, in the given order."""
    if not reports:
        raise ContractError("nothing to compare")
    metrics = {r.metric for r in reports}
    if len(metrics) != 1:
        raise ContractError(f"reports mix metrics {sorted(metrics)}")
    descriptions = descriptions or {}
    rows = [
        {
            "variant": r.label,
            "description": descriptions.get(r.label, ""),
            "mean": r.mean,
            "ci95": r.ci95,
            "n_tasks": r.n_tasks,
            "degenerate": r.degenerate,
            "fingerprint": r.fingerprint,
        }
        for r in reports
    ]
    return Comparison(reports[0].metric, rows)
