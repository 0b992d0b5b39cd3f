"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import load_config, write_config
from .errors import AirlabelError, ConfigError, NonFiniteActivation, NonFiniteLoss

log = logging.getLogger("airlabel")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="airlabel", description="Hierarchical airway branch labeling on tree graphs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a synthetic train/test dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model on a dataset's train split")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a trained run on a dataset's test split")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="report JSON path; CSV and figures are written next to it")

    pr = sub.add_parser("predict", help="label one tree file")
    pr.add_argument("--run", required=True)
    pr.add_argument("--tree", required=True)
    pr.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="train and evaluate the component variants")
    a.add_argument("--data", required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)

    d = sub.add_parser("export-dot", help="write a Graphviz DOT view of predictions")
    d.add_argument("--tree", required=True)
    d.add_argument("--pred", required=True)
    d.add_argument("--out", required=True)
    return p


def _load_split(data_dir, split):
    from .synth import load_manifest
    from .tree import load_tree

    manifest = load_manifest(data_dir)
    return [load_tree(Path(data_dir) / rel) for rel in manifest[split]]


def cmd_gen_data(args) -> None:
    from .synth import make_dataset

    cfg = load_config(args.config)
    out = Path(args.out)
    make_dataset(cfg.generator, cfg.data.n_train, cfg.data.n_test, out)
    write_config(cfg, out / "config.json")
    log.info("wrote %d train / %d test trees to %s", cfg.data.n_train, cfg.data.n_test, out)


def cmd_train(args) -> None:
    from .plotting import plot_training_curve
    from .training import train

    cfg = load_config(args.config)
    trees = _load_split(args.data, "train")
    if not trees:
        raise ConfigError("dataset has no training trees")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.json")
    result = train(trees, cfg.model, cfg.train, out_dir=out)
    if result.history:
        plot_training_curve(result.history, out / "training_loss.png")


def _report_paths(report_path):
    report_path = Path(report_path)
    stem = report_path.with_suffix("")
    return report_path, stem.with_suffix(".csv"), Path(f"{stem}_levels.png"), Path(f"{stem}_loss.png")


def cmd_eval(args) -> None:
    from .metrics import evaluate_model
    from .plotting import plot_level_metrics, plot_training_curve
    from .training import load_checkpoint

    model, _ = load_checkpoint(Path(args.run) / "model.json")
    trees = _load_split(args.data, "test")
    if not trees:
        raise ConfigError("dataset has no test trees")
    report, _ = evaluate_model(model, trees)
    json_path, csv_path, levels_png, loss_png = _report_paths(args.report)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in report.items():
            w.writerow([k, v])
    plot_level_metrics(report, levels_png)
    history = Path(args.run) / "history.json"
    if history.exists():
        hist = json.loads(history.read_text())
        if hist:
            plot_training_curve(hist, loss_png)


def cmd_predict(args) -> None:
    from .training import load_checkpoint, predict, write_predictions
    from .tree import load_tree

    model, _ = load_checkpoint(Path(args.run) / "model.json")
    tree = load_tree(args.tree)
    write_predictions(predict(tree, model), args.out)


def cmd_ablate(args) -> None:
    from .ablation import ablation_suite, write_ablation
    from .plotting import plot_ablation

    cfg = load_config(args.config)
    train_trees = _load_split(args.data, "train")
    test_trees = _load_split(args.data, "test")
    if not train_trees or not test_trees:
        raise ConfigError("ablation needs both train and test trees")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.json")
    result = ablation_suite(train_trees, test_trees, cfg.model, cfg.train, cfg.ablation)
    write_ablation(result, out)
    plot_ablation(result["table"], out / "ablation.png")


def cmd_export_dot(args) -> None:
    from .dot import write_dot
    from .training import read_predictions
    from .tree import load_tree

    tree = load_tree(args.tree)
    pred = read_predictions(args.pred)
    if len(pred["seg"]) != tree.N:
        raise ConfigError(f"prediction file has {len(pred['seg'])} nodes, tree has {tree.N}")
    write_dot(tree, pred, args.out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "export-dot": cmd_export_dot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        COMMANDS[args.command](args)
    except (NonFiniteLoss, NonFiniteActivation) as exc:
        print(f"airlabel: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AirlabelError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"airlabel: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
