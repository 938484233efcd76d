"""Experiment reports: per-trial rows plus summary, written as CSV and JSON."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__


def format_value(v) -> str:
    """Floats at 17 significant digits so they round-trip exactly."""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if hasattr(v, "item"):
        return v.item()
    return v


@dataclass
class ExperimentReport:
    name: str
    config: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    version: str = __version__
    reference: dict = field(default_factory=dict)

    def add(self, **row):
        self.rows.append(row)

    @property
    def columns(self) -> list[str]:
        cols: list[str] = []
        for row in self.rows:
            cols.extend(k for k in row if k not in cols)
        return cols

    def where(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def values(self, metric: str = "accuracy", **match) -> list[float]:
        return [r[metric] for r in self.where(**match)]

    def mean(self, metric: str = "accuracy", **match) -> float:
        vals = self.values(metric, **match)
        if not vals:
            raise KeyError(f"no rows match {match}")
        return math.fsum(vals) / len(vals)

    def summary(self, metric: str = "accuracy", by: tuple = ("condition",)) -> list[dict]:
        """Mean and population std of ``metric`` per group, in first-seen order."""
        groups: dict[tuple, list[float]] = defaultdict(list)
        for r in self.rows:
            if metric in r:
                groups[tuple(r.get(k) for k in by)].append(r[metric])
        out = []
        for key, vals in groups.items():
            mu = math.fsum(vals) / len(vals)
            sd = math.sqrt(math.fsum((v - mu) ** 2 for v in vals) / len(vals))
            out.append({**dict(zip(by, key)), "n": len(vals), "mean": mu, "std": sd})
        return out

    def to_csv(self) -> str:
        """RFC-4180 text: header row, CRLF line ends, one row per trial.

        The trailing ``version`` and ``config`` columns carry provenance.
        """
        cols = self.columns
        buf = io.StringIO(newline="")
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(["experiment", *cols, "version", "config"])
        cfg = json.dumps(self.config, sort_keys=True, default=_jsonable)
        for r in self.rows:
            writer.writerow([self.name, *(format_value(r.get(c, "")) for c in cols), self.version, cfg])
        return buf.getvalue()

    def default_metric(self) -> str:
        for m in ("accuracy", "ppl", "distance", "val_loss", "value"):
            if any(m in r for r in self.rows):
                return m
        return "value"

    def to_dict(self, by: tuple = ("condition",), metric: str | None = None) -> dict:
        metric = metric or self.default_metric()
        return {"experiment": self.name, "version": self.version, "config": self.config,
                "summary": self.summary(metric, by), "reference": self.reference, "rows": self.rows}

    def to_json(self, by: tuple = ("condition",), metric: str | None = None) -> str:
        return json.dumps(self.to_dict(by, metric), indent=2, sort_keys=True, default=_jsonable) + "\n"

    def write(self, out_dir: str | Path, formats=("csv", "json"), by: tuple = ("condition",),
              metric: str | None = None) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        if "csv" in formats:
            path = out_dir / f"{self.name}.csv"
            path.write_bytes(self.to_csv().encode())
            paths.append(path)
        if "json" in formats:
            path = out_dir / f"{self.name}.json"
            path.write_text(self.to_json(by, metric))
            paths.append(path)
        return paths

    def table(self, metric: str = "accuracy", by: tuple = ("condition",), scale: float = 100.0) -> str:
        """Plain-text summary table for the terminal."""
        rows = self.summary(metric, by)
        head = [*by, "n", "mean", "std"]
        body = [[str(r[k]) for k in by] + [str(r["n"]), f"{r['mean'] * scale:.2f}", f"{r['std'] * scale:.2f}"]
                for r in rows]
        widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
        lines += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
        return "\n".join(lines)
