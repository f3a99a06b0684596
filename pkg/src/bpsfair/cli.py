"""Command-line surface: train, grid, evaluate, report, synth."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .data import (
    DatasetSchema,
    EncoderState,
    apply_encoder,
    fit_encoder,
    load_csv,
    mc_splits,
    synthesize_biased,
    write_csv,
)
from .engine import evaluate as evaluate_state
from .engine import run_grid, train_model
from .errors import BpsfairError, ConfigError
from .metrics import BpsReport, evaluate_prediction_dump
from .network import load_model, save_model
from .report import (
    cells_from_runs,
    emit_comparison_tables,
    emit_plot_series,
    emit_results,
    file_digest,
    fmt,
    read_runs_csv,
    write_cells_csv,
    write_manifest,
)

__all__ = ["main"]


def _default_jobs() -> int:
    env = os.environ.get("BPSFAIR_JOBS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _load_table(cfg: RunConfig, dataset_override):
    path = Path(dataset_override) if dataset_override else cfg.dataset_path
    if path is None:
        raise ConfigError("no dataset: set [dataset] path in the config or pass --dataset")
    if cfg.schema is None:
        raise ConfigError("no dataset schema: set a preset or a [dataset] schema block")
    return load_csv(path, cfg.schema), path


def _schema_to_dict(schema: DatasetSchema) -> dict:
    return {
        "label": schema.label,
        "positive_label": schema.positive_label,
        "negative_label": schema.negative_label,
        "sensitive": schema.sensitive,
        "sensitive_map": dict(schema.sensitive_map),
        "categorical": list(schema.categorical),
        "continuous": list(schema.continuous),
        "ignore": list(schema.ignore),
        "label_aliases": dict(schema.label_aliases),
        "missing_token": schema.missing_token,
    }


def _schema_from_dict(d: dict) -> DatasetSchema:
    return DatasetSchema(
        label=d["label"],
        positive_label=d["positive_label"],
        negative_label=d.get("negative_label", "0"),
        sensitive=d["sensitive"],
        sensitive_map={k: int(v) for k, v in d["sensitive_map"].items()},
        categorical=tuple(d["categorical"]),
        continuous=tuple(d["continuous"]),
        ignore=tuple(d.get("ignore", ())),
        label_aliases=d.get("label_aliases", {}),
        missing_token=d.get("missing_token", "?"),
    )


def _report_to_dict(report: BpsReport) -> dict:
    out = {}
    for kind, entry in report.entries.items():
        out[kind.value] = {
            "group_values": {str(g): v for g, v in entry.group_values.items()},
            "population_value": entry.population_value,
            "bps": entry.bps,
            "undefined_groups": list(entry.undefined_groups),
        }
    return out


def _print_report(report: BpsReport, accuracy=None):
    print(f"{'measure':<9}{'group0':>10}{'group1':>10}{'bps':>9}")
    for kind, entry in report.entries.items():
        gids = sorted(entry.group_values)
        cells = []
        for gid in gids[:2]:
            v = entry.group_values[gid]
            cells.append("undef" if v is None else fmt(v))
        while len(cells) < 2:
            cells.append("-")
        bps = "undef" if entry.bps is None else fmt(entry.bps)
        print(f"{kind.value:<9}{cells[0]:>10}{cells[1]:>10}{bps:>9}")
    if accuracy is not None:
        print(f"accuracy {fmt(accuracy)}")


def _write_report_csv(report: BpsReport, path, accuracy=None):
    import csv

    gids = sorted(next(iter(report.entries.values())).group_values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["measure"] + [f"group{g}" for g in gids] + ["population", "bps"])
        for kind, entry in report.entries.items():
            row = [kind.value]
            row += [fmt(entry.group_values[g]) for g in gids]
            row += [fmt(entry.population_value), fmt(entry.bps)]
            writer.writerow(row)
        if accuracy is not None:
            writer.writerow(["accuracy"] + [""] * len(gids) + ["", fmt(accuracy)])


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    table, data_path = _load_table(cfg, args.dataset)
    seed = args.seed if args.seed is not None else cfg.training["seed"]
    split = mc_splits(table.n_rows, cfg.plan)[0]
    encoder = fit_encoder(table, rows=split[0])
    dataset = apply_encoder(table, encoder)
    train_config = cfg.train_config(dataset.X.shape[1], seed_override=seed)

    state, result = train_model(dataset, split, train_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metadata = {
        "schema": _schema_to_dict(table.schema),
        "encoder": encoder.to_dict(),
        "feature_names": list(dataset.feature_names),
    }
    save_model(out / "model.bpsf", state, metadata)
    payload = {
        "accuracy": result.accuracy,
        "bce": result.bce,
        "best_epoch": result.best_epoch,
        "seed": result.seed,
        "terms": [str(t) for t in train_config.terms],
        "denominator_mode": train_config.denominator_mode.value,
        "bps": _report_to_dict(result.report),
        "per_term": [
            {"term": str(tv.term), "soft_bps": tv.soft_bps, "loss": tv.term_loss,
             "skipped": tv.skipped}
            for tv in result.per_term
        ],
        "trace": list(result.trace),
    }
    (out / "run_result.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, config_path=args.config, dataset_path=data_path, version=__version__)
    print(f"trained 1 model: test accuracy {fmt(result.accuracy)} "
          f"(best epoch {result.best_epoch}); artifacts in {out}")
    return 0


def cmd_grid(args) -> int:
    cfg = load_config(args.config)
    if cfg.grid is None:
        raise ConfigError("config has no [grid] section")
    table, data_path = _load_table(cfg, args.dataset)
    seed = args.seed if args.seed is not None else cfg.training["seed"]
    base_config = cfg.train_config(1, seed_override=seed)  # input_dim resolved per split

    result = run_grid(table, base_config, cfg.grid, cfg.plan, jobs=args.jobs)
    out = Path(args.out)
    rows = emit_results(result, out)
    cells = cells_from_runs(rows)
    emit_plot_series(cells, out, measures=cfg.plot_measures)
    if cfg.table_rows:
        emit_comparison_tables(cells, out, cfg.table_rows)
    grid_echo = {
        "templates": [[f"{k.value}*{s:g}" for k, s in t] for t in cfg.grid.templates],
        "variants": [str(v) for v in cfg.grid.variants],
        "powers": list(cfg.grid.powers),
        "alphas": list(cfg.grid.alphas),
        "iterations": cfg.grid.iterations or cfg.plan.iterations,
    }
    write_manifest(out, config_path=args.config, dataset_path=data_path,
                   grid_spec=grid_echo, version=__version__)
    n_runs = sum(len(c.runs) for c in result.cells)
    n_diverged = sum(c.n_diverged for c in result.cells)
    print(f"grid finished: {len(result.cells)} cells, {n_runs} runs "
          f"({n_diverged} diverged); results in {out}")
    return 0


def cmd_evaluate(args) -> int:
    if bool(args.predictions) == bool(args.model):
        raise ConfigError("evaluate needs exactly one of --predictions or --model")
    if args.predictions:
        report = evaluate_prediction_dump(args.predictions)
        accuracy = None
    else:
        state, metadata = load_model(args.model)
        if args.dataset is None:
            raise ConfigError("evaluating a model artifact needs --dataset")
        schema = _schema_from_dict(metadata["schema"])
        encoder = EncoderState.from_dict(metadata["encoder"])
        table = load_csv(args.dataset, schema)
        dataset = apply_encoder(table, encoder)
        frag = evaluate_state(state, dataset, np.arange(dataset.n_rows))
        report, accuracy = frag.report, frag.accuracy
    _print_report(report, accuracy)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_report_csv(report, out / "evaluation.csv", accuracy)
    return 0


def _check_config_digest(out: Path, config_path) -> None:
    """A results directory is tied to the config that produced it."""
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        return
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    recorded = manifest.get("config_digest")
    if recorded and recorded != file_digest(config_path):
        raise ConfigError(
            f"digest mismatch: {config_path} is not the config recorded in {manifest_path}"
        )


def cmd_report(args) -> int:
    out = Path(args.out)
    runs_path = out / "runs.csv"
    if not runs_path.exists():
        raise ConfigError(f"{runs_path} not found: run `bpsfair grid` first")
    rows = read_runs_csv(runs_path)
    cells = cells_from_runs(rows)
    write_cells_csv(cells, out / "cells.csv")
    table_rows, plot_measures = {}, None
    if args.config:
        _check_config_digest(out, args.config)
        cfg = load_config(args.config)
        table_rows, plot_measures = cfg.table_rows, cfg.plot_measures
    emit_plot_series(cells, out, measures=plot_measures)
    if table_rows:
        emit_comparison_tables(cells, out, table_rows)
    print(f"report rebuilt from {runs_path}")
    return 0


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    if cfg.synth is None:
        raise ConfigError("config has no [synth] section")
    params = dict(cfg.synth)
    if args.seed is not None:
        params["seed"] = args.seed
    table = synthesize_biased(
        n=int(params.get("n", 10_000)),
        base_rate_g0=float(params.get("base_rate_g0", 0.34)),
        base_rate_g1=float(params.get("base_rate_g1", 0.46)),
        group_fraction=float(params.get("group_fraction", 0.5)),
        feature_dim=int(params.get("feature_dim", 6)),
        noise=float(params.get("noise", 1.0)),
        seed=int(params.get("seed", 0)),
    )
    write_csv(table, args.out)
    print(f"wrote {table.n_rows} synthetic rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bpsfair",
        description="Train fairness-regularized classifiers and reproduce "
                    "bias-parity trade-off curves.",
    )
    parser.add_argument("--version", action="version", version=f"bpsfair {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one model from a config")
    train.add_argument("--config", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--dataset", help="override the config's dataset path")
    train.add_argument("--seed", type=int)
    train.set_defaults(func=cmd_train)

    grid = sub.add_parser("grid", help="run a regularization grid search")
    grid.add_argument("--config", required=True)
    grid.add_argument("--out", required=True)
    grid.add_argument("--dataset", help="override the config's dataset path")
    grid.add_argument("--seed", type=int)
    grid.add_argument("--jobs", type=int, default=_default_jobs(),
                      help="parallel workers (default: $BPSFAIR_JOBS or 1)")
    grid.set_defaults(func=cmd_grid)

    ev = sub.add_parser("evaluate", help="score a prediction dump or model artifact")
    ev.add_argument("--predictions", help="CSV dump with y_true, y_prob, group columns")
    ev.add_argument("--model", help="model artifact produced by `train`")
    ev.add_argument("--dataset", help="CSV to score a model artifact on")
    ev.add_argument("--out", help="also write evaluation.csv here")
    ev.set_defaults(func=cmd_evaluate)

    rep = sub.add_parser("report", help="rebuild tables/plots from stored runs.csv")
    rep.add_argument("--out", required=True, help="directory containing runs.csv")
    rep.add_argument("--config", help="config providing table row selectors")
    rep.set_defaults(func=cmd_report)

    synth = sub.add_parser("synth", help="write a synthetic biased dataset")
    synth.add_argument("--config", required=True)
    synth.add_argument("--out", required=True)
    synth.add_argument("--seed", type=int)
    synth.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BpsfairError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
