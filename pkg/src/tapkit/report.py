"""Evaluation records and Table-1-shaped report assembly."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .features import N_PARAMS

MISSING = "—"
METRIC_TITLES = {"pesq": "PESQ", "stoi": "STOI"}
TITLE = "Objective Relative Evaluation of Perceptual Quality & Intelligibility"


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    clip_id: str
    platform: str
    receiver: str
    denoise_mode: str
    system: str
    stoi: float | None = None
    pesq_external: float | None = None
    mae: list | None = None

    def __post_init__(self):
        if self.denoise_mode not in ("low", "auto"):
            raise ReportError(f"denoise_mode must be 'low' or 'auto', got {self.denoise_mode!r}")
        if self.stoi is not None and not 0.0 <= self.stoi <= 1.0:
            raise ReportError(f"stoi {self.stoi} outside [0, 1]")
        if self.mae is not None:
            mae = [float(v) for v in self.mae]
            if len(mae) != N_PARAMS or min(mae) < 0 or not all(np.isfinite(mae)):
                raise ReportError("mae must be 25 finite non-negative values")
            object.__setattr__(self, "mae", mae)

    @property
    def key(self):
        return (self.clip_id, self.platform, self.receiver, self.denoise_mode, self.system)

    def metric(self, name):
        if name == "stoi":
            return self.stoi
        if name == "pesq":
            return self.pesq_external
        raise ReportError(f"unknown metric {name!r}")


def write_records(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_records(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(EvalRecord(**json.loads(line)))
            except (TypeError, ValueError) as exc:
                raise ReportError(f"{path}:{n}: {exc}") from exc
    return out


@dataclass(frozen=True)
class Layout:
    metrics: tuple = ("pesq", "stoi")
    rows: tuple = ("platform", "receiver")
    systems: tuple | None = None   # column order; default = order of first appearance
    modes: tuple = ("low", "auto")


@dataclass
class ReportDocument:
    layout: Layout
    row_keys: list
    columns: list
    cells: dict = field(default_factory=dict)   # (metric, row_key, system, mode) -> mean or None

    def to_json(self) -> str:
        rows = []
        for rk in self.row_keys:
            entry = dict(zip(self.layout.rows, rk))
            for metric in self.layout.metrics:
                entry[metric] = {f"{s}/{m}": self.cells[(metric, rk, s, m)] for s, m in self.columns}
            rows.append(entry)
        doc = {"title": TITLE, "metrics": list(self.layout.metrics), "row_fields": list(self.layout.rows),
               "columns": [f"{s}/{m}" for s, m in self.columns], "rows": rows}
        return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"

    def to_text(self) -> str:
        lay = self.layout
        fmt = [[MISSING if v is None else f"{v:.3f}" for v in
                (self.cells[(metric, rk, s, m)] for metric in lay.metrics for s, m in self.columns)]
               for rk in self.row_keys]
        head_cols = [str(r).capitalize() for r in lay.rows]
        left = [list(map(str, rk)) for rk in self.row_keys]
        lw = [max(len(h), *(len(row[i]) for row in left)) for i, h in enumerate(head_cols)]
        n_sys = len(self.columns)
        cw = max(6, *(len(c) for row in fmt for c in row), *(len(m) for _, m in self.columns))
        sys_w = {}
        for s, _ in self.columns:
            sys_w[s] = sys_w.get(s, 0) + 1

        def left_block(values):
            return "  ".join(v.ljust(w) for v, w in zip(values, lw))

        blank = left_block([""] * len(lw))
        span = lambda k: k * cw + (k - 1) * 2  # noqa: E731
        l1 = [METRIC_TITLES.get(m, m.upper()).ljust(span(n_sys)) for m in lay.metrics]
        seen = []
        for s, _ in self.columns:
            if s not in seen:
                seen.append(s)
        l2 = ["  ".join(s.capitalize().ljust(span(sys_w[s])) for s in seen) for _ in lay.metrics]
        l3 = ["  ".join(m.capitalize().rjust(cw) for _, m in self.columns) for _ in lay.metrics]
        lines = [TITLE, "",
                 blank + " | " + " | ".join(l1),
                 blank + " | " + " | ".join(l2),
                 left_block(head_cols) + " | " + " | ".join(l3)]
        lines.append("-" * len(lines[-1]))
        for names, cells in zip(left, fmt):
            groups = [cells[i * n_sys:(i + 1) * n_sys] for i in range(len(lay.metrics))]
            lines.append(left_block(names) + " | " + " | ".join(
                "  ".join(c.rjust(cw) for c in g) for g in groups))
        return "\n".join(line.rstrip() for line in lines) + "\n"


def assemble_report(records, layout: Layout | None = None) -> ReportDocument:
    """Group records into (row, system, mode) cells and average each metric.

    Missing cells are kept as ``None`` and rendered as a dash.  PESQ values are
    only ever taken from ``pesq_external``.
    """
    layout = layout or Layout()
    records = list(records)
    if not records:
        raise ReportError("no records")
    seen = set()
    for r in records:
        if r.key in seen:
            raise ReportError(f"duplicate record for {r.key}")
        seen.add(r.key)

    row_keys, systems = [], []
    for r in records:
        rk = tuple(getattr(r, f) for f in layout.rows)
        if rk not in row_keys:
            row_keys.append(rk)
        if r.system not in systems:
            systems.append(r.system)
    if layout.systems is not None:
        unknown = [s for s in systems if s not in layout.systems]
        if unknown:
            raise ReportError(f"records contain systems not in layout: {unknown}")
        systems = list(layout.systems)
    columns = [(s, m) for s in systems for m in layout.modes]

    sums = {}
    for r in records:
        rk = tuple(getattr(r, f) for f in layout.rows)
        for metric in layout.metrics:
            v = r.metric(metric)
            if v is not None:
                sums.setdefault((metric, rk, r.system, r.denoise_mode), []).append(float(v))
    doc = ReportDocument(layout, row_keys, columns)
    for metric in layout.metrics:
        for rk in row_keys:
            for s, m in columns:
                vals = sums.get((metric, rk, s, m))
                doc.cells[(metric, rk, s, m)] = float(np.mean(vals)) if vals else None
    return doc
