"""advbench command line.

Exit status: 0 success, 1 invalid invocation or configuration, 2 runtime or
file failure. Diagnostics go to standard error; results go to files only.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

logger = logging.getLogger("advbench")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- argument types


def eps_value(text: str) -> float:
    """Budget on the [0, 1] pixel scale; accepts decimals or exact fractions like 1/255."""
    try:
        value = Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}") from None
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1] on the pixel scale, got {text}")
    return float(value)


def positive_float(text: str) -> float:
    value = eps_value(text) if "/" in text else float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def name_list(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("ADVBENCH_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"ADVBENCH_SEED must be an integer, got {env!r}") from None


def _dataset_path(path, default_name: str) -> Path:
    p = Path(path)
    return p / default_name if p.is_dir() else p


# ---------------------------------------------------------------- subcommands


GEN_DEFAULTS = {"n_train": 5000, "n_test": 1000, "affinity": "block", "affinity_seed": 0, "prior": "skewed"}


def cmd_gen_data(args):
    from advbench.data import (
        CoOccurrenceTables,
        GenerationConfig,
        generate_dataset,
        make_affinity,
        save_dataset,
        save_matrix_csv,
    )

    cfg = dict(GEN_DEFAULTS)
    if args.config:
        cfg.update(_read_json(args.config))
    if args.seed is not None or "seed" not in cfg:
        cfg["seed"] = _seed(args)
    n_train, n_test = int(cfg.pop("n_train")), int(cfg.pop("n_test"))
    if n_train < 1 or n_test < 1:
        raise UsageError("n_train and n_test must be >= 1")
    affinity = cfg.pop("affinity")
    affinity = make_affinity(affinity, int(cfg.pop("affinity_seed"))) if isinstance(affinity, str) else np.asarray(affinity)
    if "label_names" in cfg:
        from advbench.data import LabelSpace

        cfg["label_space"] = LabelSpace(tuple(cfg.pop("label_names")))
    try:
        gen = GenerationConfig(n_samples=n_train + n_test, affinity=affinity, **cfg)
    except TypeError as exc:
        raise UsageError(f"bad generator config: {exc}") from None
    ds = generate_dataset(gen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = ds.subset(range(n_train)), ds.subset(range(n_train, n_train + n_test))
    save_dataset(train, out / "train.xrds")
    save_dataset(test, out / "test.xrds")
    tables = CoOccurrenceTables.from_dataset(train)
    save_matrix_csv(tables.raw_counts, train.label_space, out / "cooc.csv")
    save_matrix_csv(tables.inverse_normalized, train.label_space, out / "cooc_inverse.csv")
    logger.info("wrote %d train / %d test samples to %s", n_train, n_test, out)


def cmd_train(args):
    from advbench.data import load_dataset
    from advbench.models import ModelConfig, TrainConfig, calibrate_thresholds, init_model, save_model, train

    ds = load_dataset(_dataset_path(args.data, "train.xrds"))
    seed = _seed(args)
    model = init_model(ModelConfig(args.arch, ds.image_hw, seed))
    cfg = TrainConfig(args.epochs, args.batch_size, args.lr, args.momentum, args.weight_decay, seed)
    model = train(model, ds, cfg)
    model.thresholds = calibrate_thresholds(model, ds)
    model.provenance["label_names"] = list(ds.label_space.names)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out)
    logger.info("trained %s for %d epochs, final loss %.5f -> %s", args.arch, args.epochs, model.provenance["curve"][-1][1] if args.epochs else float("nan"), args.out)


def _load_cooc(path):
    from advbench.data import inverse_normalize, load_matrix_csv

    matrix, _ = load_matrix_csv(path)
    if np.issubdtype(matrix.dtype, np.integer):
        return inverse_normalize(matrix)
    return matrix.astype(np.float64)


def cmd_attack(args):
    from advbench.attacks import AttackConfig, fgsm, pgd_targeted_risk, pgd_untargeted, save_adversarial
    from advbench.data import load_dataset
    from advbench.models import load_model

    if args.targeted and not args.cooc:
        raise UsageError("--targeted requires --cooc")
    if args.attack == "fgsm" and (args.targeted or args.steps != 1):
        raise UsageError("fgsm is a single untargeted step; drop --targeted and --steps")
    model = load_model(args.model)
    ds = load_dataset(_dataset_path(args.data, "test.xrds"))
    if args.limit:
        ds = ds.subset(range(min(args.limit, len(ds))))
    if args.attack == "fgsm":
        batch = fgsm(model, ds.images, ds.labels, args.eps)
    else:
        try:
            cfg = AttackConfig(args.eps, args.steps, args.alpha, args.loss, args.targeted, args.random_start, _seed(args))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if args.targeted:
            batch = pgd_targeted_risk(model, ds.images, _load_cooc(args.cooc), cfg)
        else:
            batch = pgd_untargeted(model, ds.images, ds.labels, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_adversarial(batch, ds.labels, args.out, ds.label_space)
    logger.info("attacked %d inputs, max L-inf %.6g -> %s", len(ds), float(batch.linf.max()), args.out)


def evaluate_adversarial(model, clean, adv_images, metrics, k_values, c_matrix=None, target_rows=None):
    """{(metric, k): value} for adversarial images of ``clean``; k-accuracy in percent."""
    from advbench.attacks import risk_targets
    from advbench.data import available_mask, ranking_view
    from advbench.metrics import (
        MetricError,
        k_accuracy_percent,
        loss_per_input,
        macro_auc,
        mlacc_batch,
        risk_batch,
    )
    from advbench.models import predict_probabilities

    probs = predict_probabilities(model, adv_images)
    logits = model.logits(adv_images)
    truth, avail = ranking_view(clean.labels), available_mask(clean.labels)
    thresholds = model.thresholds if model.thresholds is not None else np.full(truth.shape[1], 0.5)
    if target_rows is None and c_matrix is not None:
        _, target_rows = risk_targets(model, clean.images, c_matrix)
    out = {}
    for metric in metrics:
        if metric == "k_robust_acc":
            for k in k_values:
                out[(metric, k)] = k_accuracy_percent(probs, truth, k)
        elif metric in ("mse", "bce", "ol"):
            out[(metric, None)] = float(loss_per_input(metric, logits, truth, avail).mean())
        elif metric == "auc":
            out[(metric, None)] = macro_auc(probs, clean.labels)
        elif metric == "mlacc":
            if target_rows is not None:
                out[(metric, None)] = float(mlacc_batch(probs, target_rows, thresholds, np.ones_like(avail)).mean())
            else:
                out[(metric, None)] = float(mlacc_batch(probs, truth, thresholds, avail).mean())
        elif metric == "risk":
            if target_rows is None:
                raise MetricError("risk needs --cooc")
            out[(metric, None)] = float(risk_batch(probs, target_rows).mean())
        else:
            raise MetricError(f"unknown metric {metric!r}")
    return out


def cmd_eval(args):
    from advbench.attacks import load_adversarial
    from advbench.data import load_dataset
    from advbench.harness import EvaluationReport, ReportRow
    from advbench.metrics import METRIC_DIRECTIONS
    from advbench.models import load_model
    from advbench.report import emit_report

    unknown = set(args.metrics) - set(METRIC_DIRECTIONS)
    if unknown:
        raise UsageError(f"unknown metrics {sorted(unknown)}; choose from {sorted(METRIC_DIRECTIONS)}")
    for k in args.k:
        if not 1 <= k <= 18:
            raise UsageError(f"--k values must be in [1, 18], got {k}")
    model = load_model(args.model)
    clean = load_dataset(_dataset_path(args.data, "test.xrds"))
    adv, meta, _ = load_adversarial(args.adv)
    if adv.images.shape != clean.images[: len(adv)].shape:
        raise UsageError(f"adversarial set {adv.images.shape} does not match data {clean.images.shape}")
    clean = clean.subset(range(len(adv)))
    c_matrix = _load_cooc(args.cooc) if args.cooc else None
    values = evaluate_adversarial(model, clean, adv.images, args.metrics, args.k, c_matrix)
    report = EvaluationReport("eval")
    eps = float(meta.get("epsilon", "0"))
    steps = int(meta.get("steps", "1"))
    attack = meta.get("attack", "pgd")
    loss = meta.get("loss_kind", "bce")
    source = meta.get("source_model", "unknown")
    target = model.model_id
    dataset = Path(args.data).stem if not Path(args.data).is_dir() else Path(args.data).name
    for (metric, k), value in values.items():
        report.add(ReportRow(source, target, dataset, attack, eps, steps, loss, metric, k, value, METRIC_DIRECTIONS[metric]))
    emit_report(report, "csv", args.out)
    logger.info("wrote %d metric rows to %s", len(report.rows), args.out)


def _plan(args):
    from advbench.harness import ExperimentPlan

    overrides = {"jobs": args.jobs}
    if args.seed is not None or os.environ.get("ADVBENCH_SEED") is not None:
        overrides["master_seed"] = _seed(args)
    return ExperimentPlan.load(args.plan, **overrides)


def cmd_matrix(args):
    from advbench.harness import cross_dataset_eval, transfer_matrix
    from advbench.report import write_run_dir

    plan = _plan(args)
    out = Path(args.out)
    write_run_dir(transfer_matrix(plan), out / "transfer")
    write_run_dir(cross_dataset_eval(plan), out / "cross_dataset")
    logger.info("wrote transfer and cross-dataset reports under %s", out)


def cmd_grid(args):
    from advbench.harness import loss_metric_grid, metric_correlation
    from advbench.report import write_run_dir

    plan = _plan(args)
    report = loss_metric_grid(plan)
    corr = metric_correlation(report, strict=args.strict) if report.series else []
    write_run_dir(report, args.out, corr)
    flagged = [f"{e.metric_a}/{e.metric_b}" for e in corr if e.flagged]
    if flagged:
        logger.warning("pairs with p >= 1e-3: %s", ", ".join(flagged))
    logger.info("wrote loss x metric grid to %s", args.out)


def cmd_sweep(args):
    from advbench.harness import budget_sweep
    from advbench.report import write_run_dir

    plan = _plan(args)
    write_run_dir(budget_sweep(plan), args.out)
    logger.info("wrote budget sweep to %s", args.out)


def cmd_report(args):
    from advbench.report import emit_report, read_run_dir

    src = Path(args.input)
    if not (src / "report.csv").exists():
        subdirs = sorted(p for p in src.iterdir() if (p / "report.csv").exists()) if src.is_dir() else []
        if not subdirs:
            raise FileNotFoundError(f"no report.csv in {src}")
        if args.format == "csv":
            raise UsageError(f"{src} holds several reports ({', '.join(p.name for p in subdirs)}); point --in at one")
        parts = []
        from advbench.report import render_markdown

        for sub in subdirs:
            report, corr = read_run_dir(sub)
            parts.append(render_markdown(report, corr))
        Path(args.out).write_text("\n".join(parts), encoding="utf-8")
        return
    report, corr = read_run_dir(src)
    emit_report(report, args.format, args.out, corr)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="advbench", description="Adversarial robustness evaluation for multi-label image classifiers.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more log output on stderr (repeatable)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(sp, seed_help="random seed (integer); falls back to $ADVBENCH_SEED, then 0"):
        sp.add_argument("--seed", type=int, default=None, help=seed_help)
        sp.add_argument("-v", "--verbose", action="count", default=0, help="more log output on stderr")
        return sp

    g = common(sub.add_parser("gen-data", help="generate a synthetic train/test pair and co-occurrence tables"))
    g.add_argument("--config", help="JSON generator config (n_train, n_test, affinity, prior, amplitude, ...); --seed overrides its seed")
    g.add_argument("--out", required=True, help="output directory (train.xrds, test.xrds, cooc.csv, cooc_inverse.csv)")
    g.set_defaults(func=cmd_gen_data)

    t = common(sub.add_parser("train", help="train a classifier and calibrate per-label thresholds"))
    t.add_argument("--config", help="JSON file whose keys set defaults for the flags below")
    t.add_argument("--data", required=True, help="training dataset file, or a gen-data directory (uses train.xrds)")
    t.add_argument("--arch", choices=("mlp-small", "cnn-small"), default="cnn-small", help="architecture (default cnn-small)")
    t.add_argument("--epochs", type=int, default=8, help="passes over the training set (default 8)")
    t.add_argument("--batch-size", type=int, default=64, help="inputs per SGD step (default 64)")
    t.add_argument("--lr", type=float, default=0.05, help="SGD learning rate (default 0.05)")
    t.add_argument("--momentum", type=float, default=0.9, help="SGD momentum in [0, 1) (default 0.9)")
    t.add_argument("--weight-decay", type=float, default=0.0, help="L2 penalty coefficient (default 0)")
    t.add_argument("--out", required=True, help="output model file (.xrmw)")
    t.set_defaults(func=cmd_train)

    a = common(sub.add_parser("attack", help="craft adversarial examples"), "seed for the random start (integer); falls back to $ADVBENCH_SEED, then 0")
    a.add_argument("--config", help="JSON file whose keys set defaults for the flags below")
    a.add_argument("--model", required=True, help="source model file")
    a.add_argument("--data", required=True, help="dataset file, or a gen-data directory (uses test.xrds)")
    a.add_argument("--attack", choices=("pgd", "fgsm"), default="pgd", help="attack family (default pgd)")
    a.add_argument("--eps", type=eps_value, required=True, help="L-inf budget on the [0,1] pixel scale, e.g. 0.0039 or 1/255")
    a.add_argument("--steps", type=int, default=1, help="PGD iterations (default 1)")
    a.add_argument("--alpha", type=positive_float, default=None, help="per-step size on the [0,1] pixel scale (default eps*2.5/steps)")
    a.add_argument("--loss", choices=("mse", "bce", "ol"), default="bce", help="attack loss (default bce)")
    a.add_argument("--targeted", action="store_true", help="risk-targeted PGD toward C(y*) of the clean prediction")
    a.add_argument("--cooc", help="co-occurrence CSV (raw counts or inverse-normalized) for --targeted")
    a.add_argument("--random-start", action="store_true", help="start from a uniform point in the eps-ball")
    a.add_argument("--limit", type=int, default=0, help="attack only the first N inputs (default: all)")
    a.add_argument("--out", required=True, help="output adversarial dataset file (.xrds, plus .manifest.txt)")
    a.set_defaults(func=cmd_attack)

    e = common(sub.add_parser("eval", help="score adversarial examples against a model"))
    e.add_argument("--config", help="JSON file whose keys set defaults for the flags below")
    e.add_argument("--model", required=True, help="model to evaluate (the attack target)")
    e.add_argument("--adv", required=True, help="adversarial dataset written by 'attack'")
    e.add_argument("--data", required=True, help="clean dataset the attack was run on (file or gen-data directory)")
    e.add_argument("--metrics", type=name_list, default=["k_robust_acc"], help="comma list of k_robust_acc,auc,mse,bce,ol,mlacc,risk")
    e.add_argument("--k", type=int_list, default=[1, 3], help="comma list of k for k_robust_acc (default 1,3); values reported in percent")
    e.add_argument("--cooc", help="co-occurrence CSV; enables risk and target-based mlacc")
    e.add_argument("--out", required=True, help="output CSV")
    e.set_defaults(func=cmd_eval)

    for name, fn, text in (
        ("matrix", cmd_matrix, "transfer matrix and cross-dataset whitebox grid"),
        ("grid", cmd_grid, "targeted loss x metric grid with metric correlations"),
        ("sweep", cmd_sweep, "eps x steps budget sweep"),
    ):
        sp = common(sub.add_parser(name, help=text), "master seed overriding the plan's master_seed; falls back to $ADVBENCH_SEED")
        sp.add_argument("--plan", required=True, help="JSON experiment plan (eps values on the [0,1] pixel scale; fractions like \"1/255\" allowed)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="parallel cells (default 1); results do not depend on it")
        if name == "grid":
            sp.add_argument("--strict", action="store_true", help="fail on undefined correlations instead of marking them")
        sp.set_defaults(func=fn)

    r = common(sub.add_parser("report", help="render a run directory as CSV or markdown"))
    r.add_argument("--in", dest="input", required=True, help="run directory written by matrix, grid or sweep")
    r.add_argument("--format", choices=("csv", "md"), default="md", help="output format (default md)")
    r.add_argument("--out", required=True, help="output file")
    r.set_defaults(func=cmd_report)
    return p


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def _apply_config_file(parser, argv):
    """Parse ``argv`` with defaults from --config, so explicit flags still win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    if config and command not in (None, "gen-data"):
        sp = choices[command]
        known = {a.dest for a in sp._actions}
        cfg = {k.replace("-", "_"): v for k, v in _read_json(config).items()}
        unknown = set(cfg) - known
        if unknown:
            raise UsageError(f"{config}: unknown keys {sorted(unknown)}")
        for action in sp._actions:
            if action.dest in cfg:
                action.required = False
        # string defaults still go through the flag's type conversion
        sp.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    logging.basicConfig(stream=sys.stderr, format="advbench: %(levelname)s: %(message)s", level=logging.WARNING)
    from advbench.attacks import AttackError
    from advbench.data import DatasetFormatError
    from advbench.harness import PlanError
    from advbench.metrics import MetricError
    from advbench.models import ModelFormatError, TrainingDivergedError
    from advbench.report import ReportError

    try:
        args = _apply_config_file(parser, argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        logging.getLogger().setLevel(logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING)
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PlanError as exc:
        print(f"error: invalid plan: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DatasetFormatError, ModelFormatError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (AttackError, TrainingDivergedError, MetricError, ArithmeticError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
