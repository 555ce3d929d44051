"""Experiment orchestration: transfer matrices, cross-dataset grids, loss x metric
grids, budget sweeps and metric correlations.

Every cell derives its randomness from ``(master_seed, cell key)``, so running
cells on a thread pool yields the same report as running them in order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from advbench import tensor as T
from advbench.attacks import AttackConfig, AttackError, fgsm, pgd_targeted_risk, pgd_untargeted, risk_targets
from advbench.data import (
    CoOccurrenceTables,
    LabelState,
    MultiLabelDataset,
    available_mask,
    inverse_normalize,
    load_dataset,
    load_matrix_csv,
    ranking_view,
)
from advbench.metrics import (
    METRIC_DIRECTIONS,
    MetricError,
    MetricSeries,
    k_accuracy_batch,
    k_accuracy_percent,
    loss_per_input,
    macro_auc,
    mlacc_batch,
    pearson_with_pvalue,
    risk_batch,
)
from advbench.models import Model, load_model, predict_probabilities

logger = logging.getLogger(__name__)

DEFAULT_SWEEP_EPSILONS = tuple(Fraction(n, 255) for n in (Fraction(1, 2), 1, 2, 4, 8))
DEFAULT_SWEEP_STEPS = (1, 5, 10, 25, 50)
GRID_METRICS = ("k_robust_acc", "auc", "mse", "bce", "mlacc", "risk")
FAILED = "failed"
_CELL_ERRORS = (AttackError, MetricError, T.NonFiniteError, T.ShapeError, ValueError, ArithmeticError)


class PlanError(ValueError):
    pass


def parse_fraction(value) -> float:
    """Float from a number or an exact rational literal such as ``"1/255"``."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, Fraction):
        return float(value)
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError):
        raise PlanError(f"not a number or fraction: {value!r}") from None


# ---------------------------------------------------------------- plan


@dataclass(frozen=True)
class AttackSpec:
    """One attack configuration in a plan; ``kind`` is fgsm, pgd or pgd-risk."""

    kind: str = "pgd"
    epsilon: float = 1 / 255
    steps: int = 25
    alpha: float | None = None
    loss: str = "bce"
    random_start: bool = False

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd", "pgd-risk"):
            raise PlanError(f"unknown attack kind {self.kind!r}")
        if self.kind == "fgsm" and (self.steps != 1 or self.loss != "bce"):
            object.__setattr__(self, "steps", 1)
            object.__setattr__(self, "loss", "bce")

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        unknown = set(d) - {"kind", "epsilon", "eps", "steps", "alpha", "loss", "random_start"}
        if unknown:
            raise PlanError(f"unknown attack fields {sorted(unknown)}")
        eps = d.get("epsilon", d.get("eps", 1 / 255))
        alpha = d.get("alpha")
        return cls(
            kind=d.get("kind", "pgd"),
            epsilon=parse_fraction(eps),
            steps=int(d.get("steps", 25)),
            alpha=None if alpha is None else parse_fraction(alpha),
            loss=str(d.get("loss", "bce")).lower(),
            random_start=bool(d.get("random_start", False)),
        )

    def config(self, seed: int) -> AttackConfig:
        return AttackConfig(self.epsilon, self.steps, self.alpha, self.loss, self.kind == "pgd-risk", self.random_start, seed)


@dataclass
class ExperimentPlan:
    models: dict
    datasets: dict
    attacks: list = field(default_factory=lambda: [AttackSpec()])
    metrics: list = field(default_factory=lambda: list(GRID_METRICS))
    k_values: list = field(default_factory=lambda: [1, 3])
    sample_count: int = 512
    master_seed: int = 0
    batch_size: int = 64
    cooc: dict = field(default_factory=dict)
    grid_losses: list = field(default_factory=lambda: ["mse", "bce", "ol"])
    grid_epsilon: float = 1 / 255
    grid_steps: int = 25
    sweep_epsilons: list = field(default_factory=lambda: [float(e) for e in DEFAULT_SWEEP_EPSILONS])
    sweep_steps: list = field(default_factory=lambda: list(DEFAULT_SWEEP_STEPS))
    sweep_loss: str = "bce"
    sweep_include_zero: bool = False
    reference: str = "truth"
    jobs: int = 1

    def __post_init__(self):
        if not self.models:
            raise PlanError("plan needs at least one model")
        if not self.datasets:
            raise PlanError("plan needs at least one dataset")
        if self.sample_count < 1 or self.batch_size < 1 or self.jobs < 1:
            raise PlanError("sample_count, batch_size and jobs must be >= 1")
        for k in self.k_values:
            if not 1 <= int(k) <= 18:
                raise PlanError(f"k must be in [1, 18], got {k}")
        unknown = set(self.metrics) - set(METRIC_DIRECTIONS)
        if unknown:
            raise PlanError(f"unknown metrics {sorted(unknown)}")
        if self.reference not in ("truth", "clean"):
            raise PlanError("reference must be 'truth' or 'clean'")
        if not self.sweep_epsilons or not self.sweep_steps:
            raise PlanError("sweep lists must be non-empty")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentPlan":
        base = Path(base_dir)
        known = {
            "models", "datasets", "attacks", "metrics", "k", "sample_count", "master_seed", "batch_size", "cooc",
            "grid", "sweep", "reference", "jobs",
        }
        unknown = set(d) - known
        if unknown:
            raise PlanError(f"unknown plan fields {sorted(unknown)}")

        def resolve(mapping, what):
            if not isinstance(mapping, dict):
                raise PlanError(f"{what} must map ids to file paths")
            out = {}
            for key, p in mapping.items():
                path = Path(p) if Path(p).is_absolute() else base / p
                if not path.exists():
                    raise FileNotFoundError(f"{what} {key!r}: file not found: {path}")
                out[str(key)] = path
            return out

        grid = d.get("grid", {})
        sweep = d.get("sweep", {})
        kwargs = dict(
            models=resolve(d.get("models", {}), "model"),
            datasets=resolve(d.get("datasets", {}), "dataset"),
            cooc=resolve(d.get("cooc", {}), "cooc"),
            attacks=[AttackSpec.from_dict(a) for a in d.get("attacks", [{}])],
        )
        if "metrics" in d:
            kwargs["metrics"] = list(d["metrics"])
        if "k" in d:
            kwargs["k_values"] = [int(k) for k in d["k"]]
        for name in ("sample_count", "master_seed", "batch_size", "jobs"):
            if name in d:
                kwargs[name] = int(d[name])
        if "reference" in d:
            kwargs["reference"] = d["reference"]
        if "losses" in grid:
            kwargs["grid_losses"] = [str(x).lower() for x in grid["losses"]]
        if "epsilon" in grid:
            kwargs["grid_epsilon"] = parse_fraction(grid["epsilon"])
        if "steps" in grid:
            kwargs["grid_steps"] = int(grid["steps"])
        if "epsilons" in sweep:
            kwargs["sweep_epsilons"] = [parse_fraction(e) for e in sweep["epsilons"]]
        if "steps" in sweep:
            kwargs["sweep_steps"] = [int(s) for s in sweep["steps"]]
        if "loss" in sweep:
            kwargs["sweep_loss"] = str(sweep["loss"]).lower()
        if "include_zero" in sweep:
            kwargs["sweep_include_zero"] = bool(sweep["include_zero"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentPlan":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise PlanError(f"{path}: invalid JSON ({exc})") from None
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d, path.parent)


# ---------------------------------------------------------------- report


REPORT_COLUMNS = ("source_model", "target_model", "dataset", "attack", "eps", "steps", "loss", "metric", "k", "value", "direction")


@dataclass(frozen=True)
class ReportRow:
    source_model: str
    target_model: str
    dataset: str
    attack: str
    eps: float
    steps: int
    loss: str
    metric: str
    k: int | None
    value: float | None  # None marks a failed cell
    direction: str

    @property
    def key(self):
        return (self.source_model, self.target_model, self.dataset, self.attack, self.eps, self.steps, self.loss, self.metric, self.k)

    @property
    def failed(self) -> bool:
        return self.value is None


@dataclass
class EvaluationReport:
    kind: str
    rows: list = field(default_factory=list)
    series: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self._keys = {r.key for r in self.rows}
        if len(self._keys) != len(self.rows):
            raise ValueError("duplicate report keys")

    def add(self, row: ReportRow):
        if row.key in self._keys:
            raise ValueError(f"duplicate report key {row.key}")
        self._keys.add(row.key)
        self.rows.append(row)

    def value(self, **key):
        """Value of the single row matching ``key`` fields (None when failed)."""
        hits = [r for r in self.rows if all(getattr(r, k) == v for k, v in key.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {key}")
        return hits[0].value

    def select(self, **key):
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in key.items())]

    @property
    def failed_rows(self):
        return [r for r in self.rows if r.failed]


# ---------------------------------------------------------------- shared machinery


def derive_seed(master_seed: int, *key) -> int:
    """Stable 63-bit seed for a cell key, independent of scheduling order."""
    text = json.dumps([int(master_seed), *[str(k) for k in key]])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def sample_indices(master_seed: int, dataset_key: str, n_total: int, count: int) -> np.ndarray:
    """Sorted sample of ``count`` indices drawn without replacement."""
    if count > n_total:
        raise PlanError(f"sample_count {count} exceeds dataset size {n_total} ({dataset_key})")
    rng = np.random.default_rng(derive_seed(master_seed, "sample", dataset_key))
    return np.sort(rng.choice(n_total, size=count, replace=False))


class _Resources:
    """Models, sampled datasets and C matrices loaded once per run."""

    def __init__(self, plan: ExperimentPlan):
        self.plan = plan
        self.models = {}
        for key, path in plan.models.items():
            self.models[key] = path if isinstance(path, Model) else load_model(path)
        self.datasets = {}
        spaces = set()
        for key, src in plan.datasets.items():
            ds = src if isinstance(src, MultiLabelDataset) else load_dataset(src)
            idx = sample_indices(plan.master_seed, key, len(ds), plan.sample_count)
            self.datasets[key] = ds.subset(idx)
            spaces.add(ds.label_space.names)
        if len(spaces) > 1:
            raise PlanError("datasets do not share one label space")
        names = spaces.pop()
        for key, m in self.models.items():
            model_names = m.provenance.get("label_names")
            if model_names is not None and tuple(model_names) != tuple(names):
                raise PlanError(f"model {key!r} was trained on a different label space")
        self.cooc = {}
        for key, src in plan.cooc.items():
            if isinstance(src, CoOccurrenceTables):
                self.cooc[key] = src.inverse_normalized
            elif isinstance(src, np.ndarray):
                self.cooc[key] = np.asarray(src, dtype=np.float64)
            else:
                matrix, _ = load_matrix_csv(src)
                self.cooc[key] = matrix
        self._cache = {}

    def c_matrix(self, dataset_key: str) -> np.ndarray:
        if dataset_key in self.cooc:
            return self.cooc[dataset_key]
        if len(self.cooc) == 1:
            return next(iter(self.cooc.values()))
        logger.warning("no co-occurrence matrix for dataset %r; deriving it from the evaluation sample", dataset_key)
        from advbench.data import co_occurrence_counts

        c = inverse_normalize(co_occurrence_counts(self.datasets[dataset_key]))
        self.cooc[dataset_key] = c
        return c


def _run_jobs(jobs: int, fns):
    """Run zero-argument callables; results come back in submission order."""
    if jobs <= 1 or len(fns) <= 1:
        return [fn() for fn in fns]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda f: f(), fns))


def _craft(res: _Resources, model_key: str, dataset_key: str, spec: AttackSpec):
    """Adversarial images (or an exception) for one (source model, dataset, attack) cell."""
    model, ds = res.models[model_key], res.datasets[dataset_key]
    seed = derive_seed(res.plan.master_seed, "attack", model_key, dataset_key, spec)
    try:
        if spec.kind == "fgsm":
            return fgsm(model, ds.images, ds.labels, spec.epsilon).adversarials
        if spec.kind == "pgd-risk":
            return pgd_targeted_risk(model, ds.images, res.c_matrix(dataset_key), spec.config(seed)).adversarials
        return pgd_untargeted(model, ds.images, ds.labels, spec.config(seed)).adversarials
    except _CELL_ERRORS as exc:
        logger.warning("attack failed for %s on %s (%s): %s", model_key, dataset_key, spec.kind, exc)
        return exc


def _k_rows(source, target, dataset_key, spec, k_values, adv, res):
    """k-robust accuracy rows (percent) for one crafted batch evaluated on ``target``."""
    rows = []
    ds = res.datasets[dataset_key]
    probs = None
    if not isinstance(adv, Exception):
        try:
            probs = predict_probabilities(res.models[target], adv)
        except _CELL_ERRORS as exc:
            logger.warning("evaluation failed for %s: %s", target, exc)
    truth = ranking_view(ds.labels)
    for k in k_values:
        value = None if probs is None else k_accuracy_percent(probs, truth, k)
        rows.append(
            ReportRow(source, target, dataset_key, spec.kind, spec.epsilon, spec.steps, spec.loss, "k_robust_acc", int(k), value, "up")
        )
    return rows


def _provenance(plan: ExperimentPlan, kind: str) -> dict:
    import platform

    import advbench
    from advbench import kernels

    return {
        "kind": kind,
        "master_seed": plan.master_seed,
        "sample_count": plan.sample_count,
        "batch_size": plan.batch_size,
        "models": sorted(plan.models),
        "datasets": sorted(plan.datasets),
        "versions": {"advbench": advbench.__version__, "numpy": np.__version__, "python": platform.python_version()},
        "kernel_backend": kernels.BACKEND,
    }


# ---------------------------------------------------------------- experiments


def transfer_matrix(plan: ExperimentPlan) -> EvaluationReport:
    """Craft on every source model, evaluate k-robust accuracy on every target; diagonal = whitebox."""
    res = _Resources(plan)
    report = EvaluationReport("transfer", provenance=_provenance(plan, "transfer"))
    keys = [(d, a, s) for d in plan.datasets for a in plan.attacks for s in plan.models]
    crafted = _run_jobs(plan.jobs, [lambda d=d, a=a, s=s: _craft(res, s, d, a) for d, a, s in keys])
    for (d, a, s), adv in zip(keys, crafted):
        for t in plan.models:
            for row in _k_rows(s, t, d, a, plan.k_values, adv, res):
                report.add(row)
    return report


def cross_dataset_eval(plan: ExperimentPlan) -> EvaluationReport:
    """Whitebox k-robust accuracy per (model, dataset) cell."""
    res = _Resources(plan)
    report = EvaluationReport("cross_dataset", provenance=_provenance(plan, "cross_dataset"))
    keys = [(a, m, d) for a in plan.attacks for m in plan.models for d in plan.datasets]
    crafted = _run_jobs(plan.jobs, [lambda a=a, m=m, d=d: _craft(res, m, d, a) for a, m, d in keys])
    for (a, m, d), adv in zip(keys, crafted):
        for row in _k_rows(m, m, d, a, plan.k_values, adv, res):
            report.add(row)
    return report


def budget_sweep(plan: ExperimentPlan) -> EvaluationReport:
    """Whitebox k-robust accuracy over the eps x steps cross product (untargeted PGD)."""
    res = _Resources(plan)
    report = EvaluationReport("sweep", provenance=_provenance(plan, "sweep"))
    epsilons = list(plan.sweep_epsilons)
    if plan.sweep_include_zero and 0.0 not in epsilons:
        epsilons = [0.0] + epsilons
    specs = [AttackSpec("pgd", e, s, None, plan.sweep_loss) for e in epsilons for s in plan.sweep_steps]
    keys = [(m, d, a) for m in plan.models for d in plan.datasets for a in specs]
    crafted = _run_jobs(plan.jobs, [lambda m=m, d=d, a=a: _craft(res, m, d, a) for m, d, a in keys])
    for (m, d, a), adv in zip(keys, crafted):
        for row in _k_rows(m, m, d, a, plan.k_values, adv, res):
            report.add(row)
    return report


def _batched(values_fn, n, batch_size):
    """Per-batch metric values over consecutive slices of ``n`` inputs."""
    return [values_fn(slice(s, min(s + batch_size, n))) for s in range(0, n, batch_size)]


def _grid_cell(res: _Resources, model_key, dataset_key, loss, metrics, k_values):
    """(rows, series) for one (model, dataset, loss) targeted-attack cell."""
    plan = res.plan
    model, ds = res.models[model_key], res.datasets[dataset_key]
    spec = AttackSpec("pgd-risk", plan.grid_epsilon, plan.grid_steps, None, loss)

    def row(metric, k, value):
        return ReportRow(model_key, model_key, dataset_key, spec.kind, spec.epsilon, spec.steps, loss, metric, k, value, METRIC_DIRECTIONS[metric])

    labels_of = [(m, k) for m in metrics for k in (k_values if m == "k_robust_acc" else [None])]
    adv = _craft(res, model_key, dataset_key, spec)
    if isinstance(adv, Exception):
        return [row(m, k, None) for m, k in labels_of], {}
    c = res.c_matrix(dataset_key)
    _, targets = risk_targets(model, ds.images, c)
    adv_logits = model.logits(adv)
    probs = predict_probabilities(model, adv)
    truth, avail = ranking_view(ds.labels), available_mask(ds.labels)
    if plan.reference == "clean":
        reference, ref_mask = predict_probabilities(model, ds.images), np.ones_like(avail)
    else:
        reference, ref_mask = truth, avail
    thresholds = model.thresholds if model.thresholds is not None else np.full(truth.shape[1], 0.5)
    full = np.ones(targets.shape, dtype=bool)
    n = len(ds)

    per_input = {
        "k_robust_acc": lambda k: 100.0 * k_accuracy_batch(probs, truth, k),
        "mse": lambda k: loss_per_input("mse", adv_logits, reference, ref_mask),
        "bce": lambda k: loss_per_input("bce", adv_logits, reference, ref_mask),
        "ol": lambda k: loss_per_input("ol", adv_logits, reference, ref_mask),
        "mlacc": lambda k: mlacc_batch(probs, targets, thresholds, full),
        "risk": lambda k: risk_batch(probs, targets),
    }
    rows, series = [], {}
    for metric, k in labels_of:
        try:
            if metric == "auc":
                value = macro_auc(probs, ds.labels)
                batches = _batched(lambda sl: _safe_auc(probs[sl], ds.labels[sl]), n, plan.batch_size)
            else:
                vals = per_input[metric](k)
                value = k_accuracy_percent(probs, truth, k) if metric == "k_robust_acc" else float(vals.mean())
                batches = _batched(lambda sl: float(vals[sl].mean()), n, plan.batch_size)
        except _CELL_ERRORS as exc:
            logger.warning("metric %s failed for %s/%s/%s: %s", metric, model_key, dataset_key, loss, exc)
            rows.append(row(metric, k, None))
            continue
        rows.append(row(metric, k, float(value)))
        name = metric if k is None else f"{metric}@{k}"
        series[name] = batches
    return rows, series


def _safe_auc(probs, labels):
    try:
        return macro_auc(probs, labels)
    except MetricError:
        return math.nan


def loss_metric_grid(plan: ExperimentPlan, cooc=None) -> EvaluationReport:
    """Targeted risk attacks per (model, dataset, loss), scored on every requested metric.

    The report also carries per-batch series (``plan.batch_size`` inputs per
    batch) for :func:`metric_correlation`.
    """
    if cooc is not None:
        plan = replace(plan, cooc={d: cooc for d in plan.datasets})
    res = _Resources(plan)
    report = EvaluationReport("grid", provenance=_provenance(plan, "grid"))
    metrics = [m for m in plan.metrics if m in METRIC_DIRECTIONS]
    keys = [(m, d, loss) for m in plan.models for d in plan.datasets for loss in plan.grid_losses]
    results = _run_jobs(plan.jobs, [lambda m=m, d=d, loss=loss: _grid_cell(res, m, d, loss, metrics, plan.k_values) for m, d, loss in keys])
    for (m, d, loss), (rows, series) in zip(keys, results):
        for r in rows:
            report.add(r)
        for name, values in series.items():
            report.series[(m, d, loss, name)] = values
    return report


# ---------------------------------------------------------------- correlation


@dataclass(frozen=True)
class CorrelationEntry:
    metric_a: str
    metric_b: str
    r: float | None
    p: float | None
    n: int
    flagged: bool
    status: str = "ok"


def combined_series(report: EvaluationReport) -> dict:
    """Per-metric batch series concatenated over all cells in report order."""
    out = {}
    for (m, d, loss, name), values in report.series.items():
        out.setdefault(name, []).extend(values)
    return {
        name: MetricSeries(name, list(values), list(range(len(values))))
        for name, values in out.items()
    }


def metric_correlation(report: EvaluationReport, strict: bool = False, alpha: float = 1e-3, include_self: bool = False) -> list:
    """Pearson r and p for every metric pair over the combined batch series.

    Pairs with p >= ``alpha`` are flagged. A pair whose series is constant (or
    contains undefined batches) is recorded as failed, or raises when ``strict``.
    """
    series = combined_series(report)
    names = sorted(series)
    if not names:
        raise MetricError("report carries no per-batch metric series")
    n = len(series[names[0]].values)
    if n < 3:
        raise MetricError(f"correlation needs at least 3 batches, got {n}")
    entries = []
    for i, a in enumerate(names):
        for b in names[i if include_self else i + 1 :]:
            xa, xb = np.asarray(series[a].values, float), np.asarray(series[b].values, float)
            keep = np.isfinite(xa) & np.isfinite(xb)
            try:
                if keep.sum() < 3:
                    raise MetricError(f"fewer than 3 defined batches for {a} vs {b}")
                res = pearson_with_pvalue(xa[keep], xb[keep])
            except MetricError as exc:
                if strict:
                    raise
                entries.append(CorrelationEntry(a, b, None, None, int(keep.sum()), False, f"{FAILED}: {exc}"))
                continue
            entries.append(CorrelationEntry(a, b, res.r, res.p, int(keep.sum()), res.p >= alpha))
    return entries
