"""Command-line driver: ``dermpipe <stage> [--config run.yaml] [--task T] [--out DIR] ...``.

Exit codes: 0 success, 1 internal error, 2 missing precondition (absent or
stale upstream artifact, missing input files).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import PipelineConfig, dry_run_config
from .data import TASKS
from .exceptions import MissingFilesError, MissingStageError
from .fixtures import make_fixture
from .pipeline import BINARY_TASKS, Pipeline

logger = logging.getLogger("dermpipe")

EXIT_OK, EXIT_ERROR, EXIT_PRECONDITION = 0, 1, 2
TABLES = ("table1", "table4", "table9", "table10", "table11")


def _common(p, task=True):
    p.add_argument("--config", type=Path, help="YAML run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="run directory (overrides config 'out')")
    p.add_argument("--force", action="store_true", help="recompute even if outputs are up to date")
    if task:
        p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="dermpipe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("ingest", help="validate datasets and write manifests"), task=False)
    p = sub.add_parser("split", help="ISIC-2018 holdout split, or HAM10000 plan for --task")
    _common(p)
    _common(sub.add_parser("train-seg", help="train the U-Net segmenter"), task=False)
    _common(sub.add_parser("segment", help="generate HAM10000 masks and run mask QC"), task=False)
    _common(sub.add_parser("preprocess", help="crop, resize and cache lesion images for --task"))
    p = sub.add_parser("train-clf", help="train the classifier on every fold of --task")
    _common(p)
    p.add_argument("--parallel-folds", type=int, default=1, metavar="N")
    _common(sub.add_parser("evaluate", help="metrics report for --task"))

    p = sub.add_parser("reproduce", help="run every stage needed for one results table")
    p.add_argument("table", choices=TABLES)
    _common(p, task=False)
    p.add_argument("--parallel-folds", type=int, default=1, metavar="N")
    p.add_argument("--dry-run", action="store_true", help="use the bundled synthetic fixture and tiny models")

    p = sub.add_parser("fixture", help="write the synthetic fixture datasets")
    p.add_argument("dest", type=Path)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config(args):
    if getattr(args, "dry_run", False):
        out = args.out or Path("runs/dry-run")
        make_fixture(out / "fixture")
        config = dry_run_config(out / "fixture", out)
        if args.config:
            raise ValueError("--dry-run builds its own config; drop --config")
    else:
        config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    return config.override({
        "seed": args.seed,
        "out": None if args.out is None else str(args.out),
        "task": getattr(args, "task", None),
    })


def _task(args, config):
    return getattr(args, "task", None) or config.task


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def run(args):
    if args.command == "fixture":
        paths = make_fixture(args.dest, seed=args.seed)
        _print({k: str(v) for k, v in paths.items()})
        return EXIT_OK

    config = _config(args)
    pipe = Pipeline(config, force=args.force, parallel_folds=getattr(args, "parallel_folds", 1))
    cmd = args.command
    if cmd == "ingest":
        _print(pipe.ingest())
    elif cmd == "split":
        _print(pipe.split(getattr(args, "task", None)))
    elif cmd == "train-seg":
        _print(pipe.train_seg())
    elif cmd == "segment":
        _print(pipe.segment())
    elif cmd == "preprocess":
        _print(pipe.preprocess(_task(args, config)))
    elif cmd == "train-clf":
        _print(pipe.train_clf(_task(args, config)))
    elif cmd == "evaluate":
        _print(pipe.evaluate(_task(args, config)))
    elif cmd == "reproduce":
        print(reproduce(pipe, args.table))
    return EXIT_OK


def _classification(pipe, task):
    pipe.ingest()
    pipe.split()
    pipe.train_seg()
    pipe.segment()
    pipe.split(task)
    pipe.preprocess(task)
    pipe.train_clf(task)
    return pipe.evaluate(task)


def reproduce(pipe, table):
    """Run the stages behind ``table`` and return it as text."""
    start = time.time()
    lines = []
    if table == "table1":
        pipe.ingest()
        sizes = pipe.split()["outputs"]["sizes"]
        lines.append("ISIC-2018 split\ttrain\tval\ttest")
        lines.append("holdout\t" + "\t".join(map(str, sizes)))
    elif table == "table4":
        pipe.ingest()
        pipe.split()
        pipe.train_seg()
        pipe.segment()
        summary = json.loads((pipe.out / "qc_summary.json").read_text())
        lines.append("class\tbefore\tafter\tremoved\tremoved_pct_of_total\tremoved_fraction")
        for r in summary["rows"]:
            lines.append(
                f"{r['class']}\t{r['before']}\t{r['after']}\t{r['removed']}\t"
                f"{r['removed_pct_of_total']:.2f}\t{r['removed_fraction']:.4f}"
            )
    elif table == "table9":
        lines.append("task\taccuracy\tsensitivity\tspecificity\tauc")
        for task in BINARY_TASKS:
            m = _classification(pipe, task)["outputs"]["metrics"]
            lines.append(task + "\t" + "\t".join(m[k]["mean ± std"] for k in ("accuracy", "sensitivity", "specificity", "auc")))
    elif table == "table10":
        report = _seven_class_report(pipe)
        lines.append("class\tauc")
        for c, v in report["per_class"].items():
            lines.append(f"{c}\t{_pct(v.get('auc'))}")
        lines.append(f"micro\t{_pct(report['metrics']['auc_micro']['mean'])}")
        lines.append(f"macro\t{_pct(report['metrics']['auc_macro']['mean'])}")
    elif table == "table11":
        m = _seven_class_report(pipe)["metrics"]
        lines.append("precision micro-macro\tf1 micro-macro\tauc micro-macro")
        lines.append("\t".join(
            f"{_pct(m[a + '_micro']['mean'])} - {_pct(m[a + '_macro']['mean'])}" for a in ("precision", "f1", "auc")
        ))
    lines.append(f"# {table} done in {time.time() - start:.1f}s; outputs under {pipe.out}")
    return "\n".join(lines)


def _seven_class_report(pipe):
    _classification(pipe, "seven_class")
    return json.loads((pipe.out / "reports" / "seven_class" / "report_seven_class.json").read_text())


def _pct(v):
    return "n/a" if v is None else f"{100 * v:.2f}"


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return run(args)
    except (MissingStageError, MissingFilesError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit code 1
        logger.exception("internal error")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
