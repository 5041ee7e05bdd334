"""Command-line entry point: ``smallaug {augment,search,evaluate,report}``.

Exit codes: 0 success, 2 configuration/validation error, 3 I/O error,
4 evaluator protocol failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .augment import Operation, PlacementConfig, augment_dataset, load_policies
from .data_model import load_manifest, write_manifest
from .errors import SchemaError
from .metrics import evaluate, load_detections, render_table
from .search import (OracleSpec, SearchConfig, SearchIncomplete, SubprocessEvaluator, SyntheticOracle,
                     run_search)
from .tpe import TpeConfig, Trial

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_EVALUATOR = 0, 2, 3, 4

log = logging.getLogger("smallaug")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _config_error(msg):
    return CliError(EXIT_CONFIG, msg)


def _read_text(path: str, what: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {what} {path}: {exc.strerror or exc}") from None


def _load_dataset(path: str):
    if not Path(path).is_file():
        raise CliError(EXIT_IO, f"manifest not found: {path}")
    try:
        return load_manifest(path)
    except SchemaError as exc:
        raise _config_error(f"{path}: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read dataset {path}: {exc}") from None


def _ensure_output_dir(out: str, *inputs: str) -> Path:
    out_path = Path(out).resolve()
    for inp in inputs:
        if Path(inp).resolve().parent == out_path:
            raise _config_error(f"output directory {out} would overwrite input {inp}")
    try:
        out_path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from None
    return out_path


# -- subcommands --------------------------------------------------------------

def cmd_augment(args) -> int:
    try:
        cfg = PlacementConfig(max_attempts=args.max_attempts, margin=args.margin, rng_seed=args.seed)
    except ValueError as exc:
        raise _config_error(str(exc)) from None
    try:
        policies = load_policies(_read_text(args.policies, "policy file"))
    except SchemaError as exc:
        raise _config_error(f"{args.policies}: invalid policy field {exc}") from None
    if not policies:
        raise _config_error(f"{args.policies}: policy list is empty")
    dataset = _load_dataset(args.input)
    out = _ensure_output_dir(args.output, args.input)
    log.info("augmenting %d images with %d policies", len(dataset), len(policies))
    try:
        aug = augment_dataset(dataset, policies, cfg, args.seed,
                              gate="force" if args.force_p1 else "bernoulli", workers=args.workers)
        write_manifest(aug.dataset, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"augmentation I/O failed: {exc}") from None
    print(f"images={len(aug.dataset)} pasted_instances={aug.pasted} skipped_placements={aug.skipped}")
    return EXIT_OK


def _build_evaluator(spec: str, workdir: Path):
    kind, _, rest = spec.partition(":")
    if kind == "synthetic" and rest:
        try:
            doc = json.loads(_read_text(rest, "oracle spec"))
            return SyntheticOracle(OracleSpec.from_dict(doc))
        except json.JSONDecodeError as exc:
            raise _config_error(f"{rest}: invalid JSON: {exc}") from None
        except SchemaError as exc:
            raise _config_error(f"{rest}: invalid oracle field {exc}") from None
    if kind == "subprocess" and "," in rest:
        train_cmd, loss_cmd = rest.split(",", 1)
        if train_cmd.strip() and loss_cmd.strip():
            return SubprocessEvaluator(train_cmd, loss_cmd, workdir)
    raise _config_error(f"--evaluator must be synthetic:<spec-file> or subprocess:<train-cmd>,<loss-cmd>, got {spec!r}")


def cmd_search(args) -> int:
    try:
        cfg = SearchConfig(num_search=args.num_search, k_folds=args.k, top_n=args.top_n, seed=args.seed,
                           placement=PlacementConfig(max_attempts=args.max_attempts, margin=args.margin,
                                                     rng_seed=args.seed),
                           tpe=TpeConfig(rng_seed=args.seed), workers=args.workers)
    except ValueError as exc:
        raise _config_error(str(exc)) from None
    if not args.evaluator.startswith(("synthetic:", "subprocess:")):
        raise _config_error(f"unknown evaluator {args.evaluator!r}")
    dataset = _load_dataset(args.dataset)
    if len(dataset) < cfg.k_folds:
        raise _config_error(f"{len(dataset)} images cannot be split into {cfg.k_folds} folds")
    out = _ensure_output_dir(args.out, args.dataset)
    workdir = Path(args.workdir) if args.workdir else out / "work"
    evaluator = _build_evaluator(args.evaluator, workdir)
    log.info("searching %d images: k=%d num_search=%d top_n=%d", len(dataset), cfg.k_folds, cfg.num_search,
             cfg.top_n)
    try:
        result = run_search(dataset, evaluator, cfg, out, progress=print, timing=args.timing)
    except SearchIncomplete as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"partial results written to {out}", file=sys.stderr)
        return EXIT_EVALUATOR
    except ValueError as exc:
        raise _config_error(str(exc)) from None
    print(f"policies={len(result)} out={args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not 0 < args.iou <= 1:
        raise _config_error("--iou must lie in (0, 1]")
    gt = _load_dataset(args.gt)
    try:
        dets = load_detections(_read_text(args.dets, "detections"))
    except SchemaError as exc:
        raise _config_error(f"{args.dets}: {exc}") from None
    try:
        result = evaluate(dets, gt, args.iou, include_difficult=not args.exclude_difficult,
                          recall_points=args.recall_points)
    except Exception as exc:  # UnknownImageId and friends
        raise _config_error(str(exc)) from None
    table = render_table([(args.label, result)])
    sys.stdout.write(table)
    out = Path(args.out) if args.out else Path(args.dets).with_suffix(".eval.json")
    try:
        out.write_text(json.dumps({"label": args.label, "iou": args.iou, **result.to_dict()}, indent=2) + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from None
    return EXIT_OK


OP_ORDER = [op.value for op in Operation]


def _read_trials(patterns):
    files = []
    for pat in patterns:
        matched = sorted(glob.glob(pat))
        if not matched and Path(pat).is_file():
            matched = [pat]
        files.extend(m for m in matched if m not in files)
    if not files:
        raise CliError(EXIT_IO, f"no trials files match {' '.join(patterns)}")
    rows = []
    for file_no, path in enumerate(files):
        text = _read_text(path, "trials file")
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                t = Trial.from_json(line)
                op, p, m = t.params["op"], float(t.params["p"]), int(t.params["m"])
                if op not in OP_ORDER or not math.isfinite(t.loss):
                    raise ValueError(op)
            except (ValueError, KeyError, TypeError, AttributeError):
                raise CliError(EXIT_IO, f"{path}:{line_no}: unreadable trial record") from None
            rows.append({"op": op, "p": p, "m": m, "loss": t.loss, "key": (t.loss, file_no, t.index)})
    return rows


def top_trials(rows, top: int):
    """Lowest losses first, then grouped by operation (single, multiple, all) keeping loss order."""
    best = sorted(rows, key=lambda r: r["key"])[:top]
    return sorted(best, key=lambda r: (OP_ORDER.index(r["op"]), r["key"]))


def pearson(xs, ys) -> float:
    x, y = np.asarray(xs, float), np.asarray(ys, float)
    if x.size < 2 or x.std() == 0 or y.std() == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def _plot(rows, path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    p_sum = [sum(r["p"] for r in rows if r["op"] == op) for op in OP_ORDER]
    m_sum = [sum(r["m"] for r in rows if r["op"] == op) for op in OP_ORDER]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(OP_ORDER, p_sum, label="p")
    ax.bar(OP_ORDER, m_sum, bottom=p_sum, label="m")
    ax.set_xlabel("copy-paste operation")
    ax.set_ylabel("sum of p and m")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_report(args) -> int:
    if args.top < 1:
        raise _config_error("--top must be >= 1")
    rows = top_trials(_read_trials(args.trials), args.top)
    prefix = Path(args.out)
    try:
        prefix.parent.mkdir(parents=True, exist_ok=True)
        with open(f"{prefix}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["op", "p", "m", "p_plus_m", "loss"])
            for r in rows:
                w.writerow([r["op"], f"{r['p']:.6f}", r["m"], f"{r['p'] + r['m']:.6f}", f"{r['loss']:.6f}"])
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report: {exc}") from None
    try:
        _plot(rows, Path(f"{prefix}.png"))
    except Exception as exc:  # the chart is best-effort; the CSV is the contract
        log.warning("chart not written: %s", exc)
    for op in OP_ORDER:
        sel = [r for r in rows if r["op"] == op]
        if sel:
            print(f"op={op} count={len(sel)} sum_p={sum(r['p'] for r in sel):.4f} sum_m={sum(r['m'] for r in sel)}")
    r = pearson([r["p"] for r in rows], [r["m"] for r in rows])
    print(f"selected={len(rows)} pearson_p_m={r:.4f}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    placement = argparse.ArgumentParser(add_help=False)
    placement.add_argument("--max-attempts", type=int, default=50)
    placement.add_argument("--margin", type=int, default=0)

    parser = argparse.ArgumentParser(prog="smallaug", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("augment", parents=[common, placement], help="copy-paste augment a dataset with a policy file")
    p.add_argument("--input", required=True, help="dataset manifest")
    p.add_argument("--policies", required=True, help="policy JSON file")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--force-p1", action="store_true", help="ignore p and augment every image")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("search", parents=[common, placement], help="K-fold TPE policy search")
    p.add_argument("--dataset", required=True, help="dataset manifest")
    p.add_argument("--k", type=int, default=5, help="number of folds")
    p.add_argument("--num-search", type=int, required=True, help="TPE trials per fold")
    p.add_argument("--top-n", type=int, default=4, help="policies kept per fold")
    p.add_argument("--evaluator", required=True,
                   help="synthetic:<spec.json> or subprocess:<train-cmd>,<loss-cmd>")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workdir", help="scratch directory for subprocess evaluators (default <out>/work)")
    p.add_argument("--timing", action="store_true", help="record wall-clock time in search_report.json")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", parents=[common], help="size-bucketed AP of a detections file")
    p.add_argument("--gt", required=True, help="ground-truth dataset manifest")
    p.add_argument("--dets", required=True, help="detections JSON")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--label", default="detector", help="row label in the table")
    p.add_argument("--out", help="JSON result path (default <dets>.eval.json)")
    p.add_argument("--exclude-difficult", action="store_true")
    p.add_argument("--recall-points", type=int, choices=(11, 101), default=101,
                   help="interpolation grid for AP (default 101)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="top-policy CSV, chart and p/m correlation")
    p.add_argument("--trials", required=True, nargs="+", help="trials JSONL files or globs")
    p.add_argument("--out", required=True, help="output prefix (<prefix>.csv, <prefix>.png)")
    p.add_argument("--top", type=int, default=20)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("SMALLAUG_LOG", args.log_level).upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed < 0:
        print("error: --seed must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
