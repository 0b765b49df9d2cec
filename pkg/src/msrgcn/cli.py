"""Command-line entry point.

Subcommands: ``gen``, ``train``, ``ablate``, ``eval``, ``heatmap``, ``gradcheck``.
Config files are JSON with optional sections ``gen`` (GenConfig keys),
``model`` (ModelConfig keys) and ``train`` (TrainConfig keys). Failures exit
with status 1 and print one JSON line ``{"error": ..., "message": ...}`` to
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import diagnostics, harness, synthdata
from .model import ALL_VARIANTS, ModelConfig, Variant, forward, heatmap


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _configs(path):
    cfg = harness.ExperimentConfig.load(path) if path else harness.ExperimentConfig()
    return cfg


def _model_config(section: dict, dataset, variant=None) -> ModelConfig:
    section = dict(section)
    section.setdefault("in_dim", next(iter(dataset.features.values())).shape[1])
    if variant is not None:
        section["variant"] = variant
    return ModelConfig(**section)


def cmd_gen(args):
    cfg = _configs(args.config)
    path = synthdata.generate(synthdata.GenConfig(**cfg.gen), args.out)
    print(path)


def cmd_train(args):
    cfg = _configs(args.config)
    dataset = synthdata.load_dataset(args.data)
    tc = harness.TrainConfig(**cfg.train)
    mc = _model_config(cfg.model, dataset, args.variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    folds = synthdata.group_kfold(dataset, tc.k, tc.seed)
    (out / "foldspec.json").write_text(folds.to_json() + "\n", encoding="utf-8")
    report = harness.run_experiment(dataset, tc, mc, folds, model_dir=out)
    (out / "report.json").write_text(harness.report_json(report), encoding="utf-8")
    agg = report["aggregate"]
    print(json.dumps({"variant": report["variant"], "macro_auc": agg["macro_auc"], "qw_kappa": agg["qw_kappa"]}))


def cmd_ablate(args):
    cfg = _configs(args.config)
    dataset = synthdata.load_dataset(args.data)
    tc = harness.TrainConfig(**cfg.train)
    variants = [Variant(v.strip()) for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise CliError("no variants given")
    base = _model_config(cfg.model, dataset)
    result = harness.ablate(dataset, variants, tc, base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(harness.report_json(result), encoding="utf-8")
    table = harness.format_table(result["table"])
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)


def _split_ids(dataset, echo: dict, split: str):
    if split == "all":
        return dataset.ids
    if split not in ("train", "validation", "test"):
        raise CliError(f"unknown split {split!r}; use train, validation, test or all")
    if "fold" not in echo:
        raise CliError("model file carries no fold information; use --split all")
    folds = synthdata.group_kfold(dataset, echo["k"], echo["fold_seed"])
    return getattr(folds.folds[echo["fold"]], split)


def cmd_eval(args):
    params, mc, echo = harness.load_model(args.model)
    dataset = synthdata.load_dataset(args.data)
    ids = _split_ids(dataset, echo, args.split)
    builder = harness.BatchBuilder(dataset, mc.variant)
    report = harness.evaluate_ids(builder, ids, params, mc)
    print(report.to_json())


def cmd_heatmap(args):
    params, mc, _ = harness.load_model(args.model)
    dataset = synthdata.load_dataset(args.data)
    try:
        dataset.record(args.image)
    except KeyError:
        raise CliError(f"unknown image id {args.image!r}") from None
    builder = harness.BatchBuilder(dataset, mc.variant)
    trace = forward(builder.batch([args.image]), None, params, mc)
    heatmap(trace).save(args.out)
    print(args.out)


def cmd_gradcheck(args):
    results = {name: rep for name, rep in diagnostics.check_kernels().items()}
    if args.full_model:
        results["full_model"] = diagnostics.check_full_model()
    ok = True
    for name, rep in results.items():
        status = "PASS" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{status} {name} max_rel_err={rep.max_error:.3e} tol={rep.tol:g}")
    if not ok:
        raise CliError("gradient check failed")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msrgcn", description="Multi-scale relational GCN for multiple instance learning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", help="k-fold training of one variant")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--variant", default="Full", choices=[v.value for v in ALL_VARIANTS])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ablate", help="k-fold training of several variants")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--variants", default=",".join(v.value for v in ALL_VARIANTS))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("eval", help="metrics of a saved model on a split")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("heatmap", help="export an attention heatmap (.csv or .pgm)")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--full-model", action="store_true")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
