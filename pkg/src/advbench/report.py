"""CSV / markdown emission of evaluation reports and their provenance.

Output is a pure function of the report: values are written with ``repr`` (the
shortest round-trip form), rows keep report order, and no wall-clock data
enters the CSV or markdown files.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from pathlib import Path

from advbench.harness import FAILED, REPORT_COLUMNS, CorrelationEntry, EvaluationReport, ReportRow


class ReportError(RuntimeError):
    pass


def format_value(value) -> str:
    if value is None:
        return FAILED
    return repr(float(value))


def _format_eps(eps) -> str:
    return repr(float(eps))


def row_fields(row: ReportRow) -> list:
    return [
        row.source_model,
        row.target_model,
        row.dataset,
        row.attack,
        _format_eps(row.eps),
        str(row.steps),
        row.loss,
        row.metric,
        "" if row.k is None else str(row.k),
        format_value(row.value),
        row.direction,
    ]


def render_csv(report: EvaluationReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in report.rows:
        writer.writerow(row_fields(row))
    return buf.getvalue()


def parse_csv(text: str, kind: str = "unknown") -> EvaluationReport:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != REPORT_COLUMNS:
        raise ReportError(f"unexpected report header {header}")
    rows = []
    for line_no, rec in enumerate(reader, start=2):
        if len(rec) != len(REPORT_COLUMNS):
            raise ReportError(f"line {line_no}: expected {len(REPORT_COLUMNS)} fields, got {len(rec)}")
        d = dict(zip(REPORT_COLUMNS, rec))
        try:
            rows.append(
                ReportRow(
                    d["source_model"],
                    d["target_model"],
                    d["dataset"],
                    d["attack"],
                    float(d["eps"]),
                    int(d["steps"]),
                    d["loss"],
                    d["metric"],
                    None if d["k"] == "" else int(d["k"]),
                    None if d["value"] == FAILED else float(d["value"]),
                    d["direction"],
                )
            )
        except ValueError as exc:
            raise ReportError(f"line {line_no}: {exc}") from None
    return EvaluationReport(kind, rows)


# ---------------------------------------------------------------- markdown


def _cell(value) -> str:
    if value is None:
        return FAILED
    return f"{value:.2f}"


def _mean(values):
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return sum(vals) / len(vals) if vals else None


def _pivot(title, row_keys, col_keys, lookup, row_label, means=True) -> list:
    """Markdown lines for one pivot table; ``lookup(r, c)`` returns a value or None."""
    header = [row_label, *(str(c) for c in col_keys)] + (["row mean"] if means else [])
    lines = [f"#### {title}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in row_keys:
        vals = [lookup(r, c) for c in col_keys]
        cells = [_cell(v) if v is not _MISSING else "" for v in vals]
        if means:
            cells.append(_cell(_mean([v for v in vals if v is not _MISSING])))
        lines.append("| " + " | ".join([str(r), *cells]) + " |")
    if means:
        col_means = []
        for c in col_keys:
            col_means.append(_cell(_mean([v for v in (lookup(r, c) for r in row_keys) if v is not _MISSING])))
        lines.append("| " + " | ".join(["column mean", *col_means, ""]) + " |")
    lines.append("")
    return lines


_MISSING = object()


def _unique(seq):
    seen, out = set(), []
    for x in seq:
        if x not in seen:
            seen.add(x)
            out.append(x)
    return out


def _index(rows, key_fn):
    table = {}
    for r in rows:
        table[key_fn(r)] = r.value
    return lambda *k: table.get(k, _MISSING)


def _attack_label(r) -> str:
    return f"{r.attack} eps={float(r.eps):.6g} steps={r.steps} loss={r.loss}"


def _metric_label(r) -> str:
    return r.metric if r.k is None else f"{r.metric}@{r.k}"


def infer_kind(report: EvaluationReport) -> str:
    if report.kind != "unknown":
        return report.kind
    rows = report.rows
    if any(r.source_model != r.target_model for r in rows):
        return "transfer"
    if any(r.metric != "k_robust_acc" for r in rows):
        return "grid"
    if len({(r.eps, r.steps) for r in rows}) > 1:
        return "sweep"
    return "cross_dataset"


def render_markdown(report: EvaluationReport, correlations=None) -> str:
    kind = infer_kind(report)
    rows = report.rows
    lines = [f"# advbench report: {kind.replace('_', ' ')}", ""]
    if not rows:
        lines += ["(no rows)", ""]
    elif kind == "transfer":
        lines += ["Rows are source models, columns are target models; values are k-robust accuracy (%).", ""]
        lookup = _index(rows, lambda r: (r.dataset, _attack_label(r), r.k, r.source_model, r.target_model))
        sources = _unique(r.source_model for r in rows)
        targets = _unique(r.target_model for r in rows)
        for d, a, k in _unique((r.dataset, _attack_label(r), r.k) for r in rows):
            lines += _pivot(f"dataset {d}, {a}, k={k}", sources, targets, lambda s, t: lookup(d, a, k, s, t), "source \\ target")
    elif kind == "cross_dataset":
        lines += ["Whitebox attacks: rows are models, columns are datasets; values are k-robust accuracy (%).", ""]
        lookup = _index(rows, lambda r: (_attack_label(r), r.k, r.source_model, r.dataset))
        models = _unique(r.source_model for r in rows)
        datasets = _unique(r.dataset for r in rows)
        for a, k in _unique((_attack_label(r), r.k) for r in rows):
            lines += _pivot(f"{a}, k={k}", models, datasets, lambda m, d: lookup(a, k, m, d), "model \\ dataset")
    elif kind == "sweep":
        lines += ["Rows are eps (x 255), columns are PGD steps; values are k-robust accuracy (%).", ""]
        lookup = _index(rows, lambda r: (r.source_model, r.dataset, r.loss, r.k, _fmt_eps255(r.eps), r.steps))
        eps_keys = _unique(_fmt_eps255(r.eps) for r in rows)
        steps = _unique(r.steps for r in rows)
        for m, d, loss, k in _unique((r.source_model, r.dataset, r.loss, r.k) for r in rows):
            lines += _pivot(
                f"model {m}, dataset {d}, loss={loss}, k={k}", eps_keys, steps, lambda e, s: lookup(m, d, loss, k, e, s), "eps*255 \\ steps", means=False
            )
    else:
        directions = {}
        for r in rows:
            directions[_metric_label(r)] = r.direction
        metrics = _unique(_metric_label(r) for r in rows)
        lookup = _index(rows, lambda r: (r.dataset, _attack_label_no_loss(r), r.source_model + " / " + r.loss, _metric_label(r)))
        lines += ["Targeted risk attacks; arrows give the robust direction (up: higher is more robust).", ""]
        for d, a in _unique((r.dataset, _attack_label_no_loss(r)) for r in rows):
            cells = _unique(r.source_model + " / " + r.loss for r in rows if r.dataset == d and _attack_label_no_loss(r) == a)
            labelled = [f"{m} {'↑' if directions[m] == 'up' else '↓'}" for m in metrics]
            header = ["model / loss", *labelled]
            lines += [f"#### dataset {d}, {a}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
            for c in cells:
                vals = [lookup(d, a, c, m) for m in metrics]
                lines.append("| " + " | ".join([c, *[_cell(v) if v is not _MISSING else "" for v in vals]]) + " |")
            lines.append("")
    if correlations:
        lines += render_correlations_md(correlations)
    return "\n".join(lines).rstrip("\n") + "\n"


def _attack_label_no_loss(r) -> str:
    return f"{r.attack} eps={float(r.eps):.6g} steps={r.steps}"


def _fmt_eps255(eps) -> str:
    return f"{float(eps) * 255:.6g}"


# ---------------------------------------------------------------- correlations


CORRELATION_COLUMNS = ("metric_a", "metric_b", "r", "p", "n", "flagged", "status")


def render_correlations_csv(entries) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CORRELATION_COLUMNS)
    for e in entries:
        writer.writerow(
            [e.metric_a, e.metric_b, format_value(e.r), format_value(e.p), e.n, "yes" if e.flagged else "no", e.status]
        )
    return buf.getvalue()


def parse_correlations_csv(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for d in reader:
        r = None if d["r"] == FAILED else float(d["r"])
        p = None if d["p"] == FAILED else float(d["p"])
        out.append(CorrelationEntry(d["metric_a"], d["metric_b"], r, p, int(d["n"]), d["flagged"] == "yes", d["status"]))
    return out


def render_correlations_md(entries) -> list:
    lines = ["#### Pearson correlation between per-batch metric series", "", "| metric a | metric b | r | p | batches | note |", "|---|---|---|---|---|---|"]
    for e in entries:
        if e.r is None:
            lines.append(f"| {e.metric_a} | {e.metric_b} | {FAILED} | {FAILED} | {e.n} | {e.status} |")
            continue
        note = "p >= 1e-3" if e.flagged else ""
        lines.append(f"| {e.metric_a} | {e.metric_b} | {e.r:.4f} | {e.p:.3g} | {e.n} | {note} |")
    lines.append("")
    return lines


# ---------------------------------------------------------------- files


def _write(path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from None
    return path


def emit_report(report: EvaluationReport, fmt: str, path, correlations=None) -> Path:
    """Write ``report`` as ``csv`` or ``markdown``; identical reports give identical bytes."""
    fmt = {"md": "markdown"}.get(fmt, fmt)
    if fmt == "csv":
        return _write(path, render_csv(report))
    if fmt == "markdown":
        return _write(path, render_markdown(report, correlations))
    raise ReportError(f"unknown report format {fmt!r}")


def provenance_record(report: EvaluationReport, extra: dict | None = None) -> dict:
    """Provenance dict with a timestamp from SOURCE_DATE_EPOCH when set (reproducible builds)."""
    record = dict(report.provenance)
    record.update(extra or {})
    sde = os.environ.get("SOURCE_DATE_EPOCH")
    ts = int(sde) if sde and sde.strip().isdigit() else int(time.time())
    record["created_utc"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(ts))
    record["n_rows"] = len(report.rows)
    record["n_failed"] = len(report.failed_rows)
    return record


def write_series(report: EvaluationReport, path) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "dataset", "loss", "metric", "batch", "value"])
    for (m, d, loss, name), values in report.series.items():
        for i, v in enumerate(values):
            writer.writerow([m, d, loss, name, i, repr(float(v))])
    return _write(path, buf.getvalue())


def write_run_dir(report: EvaluationReport, out_dir, correlations=None, extra_provenance=None) -> Path:
    """report.csv, report.md, provenance.json (+ series.csv, correlations.csv for grids)."""
    out = Path(out_dir)
    emit_report(report, "csv", out / "report.csv")
    emit_report(report, "markdown", out / "report.md", correlations)
    if report.series:
        write_series(report, out / "series.csv")
    if correlations is not None:
        _write(out / "correlations.csv", render_correlations_csv(correlations))
    prov = provenance_record(report, extra_provenance)
    _write(out / "provenance.json", json.dumps(prov, sort_keys=True, indent=2) + "\n")
    return out


def read_run_dir(in_dir):
    """(report, correlations or None) from a directory written by :func:`write_run_dir`."""
    d = Path(in_dir)
    try:
        text = (d / "report.csv").read_text(encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot read {d / 'report.csv'}: {exc}") from None
    kind = "unknown"
    prov_path = d / "provenance.json"
    if prov_path.exists():
        try:
            kind = json.loads(prov_path.read_text()).get("kind", "unknown")
        except json.JSONDecodeError:
            kind = "unknown"
    report = parse_csv(text, kind)
    corr = None
    if (d / "correlations.csv").exists():
        corr = parse_correlations_csv((d / "correlations.csv").read_text(encoding="utf-8"))
    return report, corr
