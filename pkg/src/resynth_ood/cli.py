"""Command-line entry point: ``resynth-ood <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 ok, 2 config error, 3 missing or stale prerequisite,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, plots
from .config import DIAGNOSE_KINDS, RunConfig, load_config
from .detection import read_detection_csv
from .errors import MissingPrerequisiteError, NumericalError, ResynthError
from .evaluation import rows_to_csv, summary_text
from .io_utils import atomic_write_text
from .pipeline import (Manifest, baseline_scores, eval_set, evaluate_rows, gen_data,
                       load_data, load_models, run_detection, train_classifier_stage,
                       train_score_stage, write_detection)

log = logging.getLogger("resynth_ood")


def _workdir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.workdir)


def cmd_gen_data(cfg: RunConfig, args) -> int:
    ds = gen_data(cfg)
    log.info("wrote %d images to %s", len(ds), cfg.paths.resolve("dataset"))
    return 0


def cmd_train_score(cfg: RunConfig, args) -> int:
    train_score_stage(cfg)
    log.info("wrote %s", cfg.paths.resolve("score_model"))
    return 0


def cmd_train_classifier(cfg: RunConfig, args) -> int:
    _, acc = train_classifier_stage(cfg)
    log.info("wrote %s (validation accuracy %.4f)", cfg.paths.resolve("classifier_model"), acc)
    return 0


def cmd_detect(cfg: RunConfig, args) -> int:
    split = args.split or cfg.eval.split
    out = Path(args.out) if args.out else _workdir(cfg) / f"detect-{split}"
    man = Manifest(out.name, cfg, _workdir(cfg))
    ds = load_data(cfg, man)
    models = load_models(cfg, ds, man)
    es = eval_set(ds, split, cfg.eval.max_ind, cfg.eval.max_ood)
    with man.stage("detect"):
        records = run_detection(cfg, models, es)
    with man.stage("write"):
        path = write_detection(out, records, es, man, args.dump_images or cfg.eval.dump_images)
        if args.traces:
            for r in records:
                if r.trace_csv:
                    tpath = out / "traces" / f"{r.input_id}.csv"
                    atomic_write_text(tpath, r.trace_csv)
                    man.add_artifact(tpath)
    man.write()
    bad = [r.input_id for r in records if not r.valid]
    log.info("wrote %s (%d records)", path, len(records))
    if bad:
        raise NumericalError(f"{len(bad)} record(s) invalid, first id {bad[0]}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    split = args.split or cfg.eval.split
    src = Path(args.detections) if args.detections else _workdir(cfg) / f"detect-{split}" / "detections.csv"
    if not src.is_file():
        raise MissingPrerequisiteError(f"{src} not found; run the 'detect' stage first")
    out = Path(args.out) if args.out else _workdir(cfg) / f"eval-{split}"
    man = Manifest(out.name, cfg, _workdir(cfg))
    man.add_input(src)
    rows = read_detection_csv(src.read_text())
    val_mls = val_ebo = None
    if cfg.eval.tandem:
        ds = load_data(cfg, man)
        models = load_models(cfg, ds, man)
        val = eval_set(ds, "val", None, 0)
        val_mls, val_ebo = baseline_scores(models, val.pixels)
    with man.stage("evaluate"):
        reports = evaluate_rows(rows, cfg, val_mls, val_ebo)
    table = [r.row() for r in reports]
    atomic_write_text(out / "eval.csv", rows_to_csv(table))
    atomic_write_text(out / "summary.txt", "".join(summary_text(r) + "\n" for r in reports))
    valid = [r for r in rows if r.get("valid", "1") == "1"]
    ood = np.array([r["truth"] == "OOD" for r in valid])
    named = {"final": [float(r["final"]) for r in valid],
             "-mls": [-float(r["mls"]) for r in valid],
             "ebo": [float(r["ebo"]) for r in valid]}
    with man.stage("figures"):
        plots.eval_figures(named, ood, out / "roc.png", out / "scores.png")
    for name in ("eval.csv", "summary.txt", "roc.png", "scores.png"):
        man.add_artifact(out / name)
    man.write()
    head = reports[0]
    print(f"auroc {head.auroc:.4f}  fpr@95tpr {head.fpr_at_95_tpr:.4f}  "
          f"(n_ind {head.n_ind}, n_ood {head.n_ood})")
    return 0


def cmd_diagnose(cfg: RunConfig, args) -> int:
    from . import diagnostics as dg

    kind = args.kind
    out = Path(args.out) if args.out else _workdir(cfg) / "diagnose" / kind
    man = Manifest(f"diagnose-{kind}", cfg, _workdir(cfg))
    ds = load_data(cfg, man)
    models = load_models(cfg, ds, man)
    with man.stage(kind):
        if kind == "acc_vs_t":
            rows = dg.acc_vs_t(cfg, models, ds)
        elif kind == "degradation_curves":
            rows = dg.degradation_curves(cfg, models, ds)
        else:
            runner = dg.make_runner(cfg, models, ds)
            if kind == "cutpoint_sweep":
                rows = dg.cutpoint_sweep(cfg, runner)
            elif kind == "steps_sweep":
                rows = dg.steps_sweep(cfg, runner)
            elif kind == "aes_threshold_table":
                rows = dg.aes_threshold_table(cfg, runner, ds)
            else:
                rows = dg.cleangrad_ablation(cfg, runner)
    csv_path = out / f"{kind}.csv"
    png_path = out / f"{kind}.png"
    atomic_write_text(csv_path, rows_to_csv(rows))
    figure = {"acc_vs_t": lambda: plots.acc_vs_t(rows, png_path),
              "degradation_curves": lambda: plots.degradation_curves(rows, png_path),
              "cutpoint_sweep": lambda: plots.sweep(rows, "cam_cutpoint", png_path, "CAM cut-point"),
              "steps_sweep": lambda: plots.sweep(rows, "tau_len", png_path, "DDIM steps"),
              "aes_threshold_table": lambda: plots.aes_threshold_table(rows, png_path),
              "cleangrad_ablation": lambda: plots.cleangrad_ablation(rows, png_path)}[kind]
    figure()
    man.add_artifact(csv_path)
    man.add_artifact(png_path)
    man.write()
    log.info("wrote %s and %s", csv_path, png_path)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train-score": cmd_train_score,
            "train-classifier": cmd_train_classifier, "detect": cmd_detect,
            "eval": cmd_eval, "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="resynth-ood", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the shape dataset")
    sub.add_parser("train-score", parents=[common], help="train the noise-prediction network")
    sub.add_parser("train-classifier", parents=[common], help="train the classifier under protection")
    d = sub.add_parser("detect", parents=[common], help="score a split, write detections.csv")
    d.add_argument("--split", choices=("train", "val", "test"))
    d.add_argument("--out")
    d.add_argument("--dump-images", action="store_true",
                   help="also write uint8 input/synthesis grids with an index CSV")
    d.add_argument("--traces", action="store_true", help="write per-sample early-stop traces")
    e = sub.add_parser("eval", parents=[common], help="AUROC / FPR@95 from a detections CSV")
    e.add_argument("--split", choices=("train", "val", "test"))
    e.add_argument("--detections", help="detections CSV (default: the detect output)")
    e.add_argument("--out")
    g = sub.add_parser("diagnose", parents=[common], help="diagnostic curves and ablations")
    g.add_argument("kind", choices=DIAGNOSE_KINDS)
    g.add_argument("--out")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except ResynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
