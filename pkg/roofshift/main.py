import csv
import os
import time
from dataclasses import replace

from . import debug, log
from . import utils
from .data_model import load_dataset, save_dataset, validate
from .evaluation import (
    TRACKS,
    EvalConfig,
    evaluate_dataset,
    load_predictions,
    save_predictions,
)
from .foa import RotationAngleSet
from .offset_learning import TrainConfig, run_toy, save_checkpoint
from .synth import NoiseConfig, SceneConfig, generate_scene, perturb_predictions

CSV_HEADER = ("track", "f1", "precision", "recall", "ap50_boundary", "mean_epe", "tp", "fp", "fn")


def _check_distinct(inputs, output):
    """Commands never write over their inputs"""
    if output is None:
        return
    for path in inputs:
        if path and os.path.abspath(path) == os.path.abspath(output):
            raise ValueError(f"Output '{output}' would overwrite input '{path}'")


def csv_rows(report):
    rows = []
    for track in TRACKS:
        t = report.track(track)
        epe = report.mean_epe if track == "footprint" and report.mean_epe is not None else ""
        rows.append([track, t.f1, t.precision, t.recall, t.boundary_ap50, epe, t.tp, t.fp, t.fn])
    return rows


def emit_report(report, json_path, csv_path=None):
    """JSON mirrors the MetricsReport and is authoritative. CSV is one row per track"""
    utils.write_json(report.to_json(), json_path)
    if not csv_path:
        return
    dirname = os.path.dirname(csv_path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(csv_path, "wt", newline="", encoding="utf-8") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(csv_rows(report))
    debug(f"Wrote '{csv_path}'")


def summarize_report(report):
    rows = []
    for track in TRACKS:
        t = report.track(track)
        rows.append(
            [
                track,
                f"{t.f1:.2f}",
                f"{t.precision:.2f}",
                f"{t.recall:.2f}",
                f"{t.boundary_ap50:.2f}",
                t.tp,
                t.fp,
                t.fn,
            ]
        )
    lines = utils.format_table(
        ("track", "F1", "P", "R", "AP50-B", "TP", "FP", "FN"), rows
    )
    if report.mean_epe is None:
        lines.append("EPE: no footprint true positive carries an offset")
    else:
        lines.append(
            f"EPE: mean {report.mean_epe:.3f} px, median {report.median_epe:.3f} px, "
            f"max {report.max_epe:.3f} px over {report.epe_count} TPs"
        )
    return lines


class RoofShift:
    """
    Drives one command with a parsed Config. Each command method returns
    the exit status (0 or 1); errors propagate to the CLI.
    """

    def __init__(self, config):
        self.t0 = time.time()
        self.config = config

    def run(self, args):
        status = getattr(self, args.command.replace("-", "_"))(args)
        log(f"{args.command} ran in {utils.time_format(time.time() - self.t0)}")
        return status

    def validate(self, args):
        dataset = load_dataset(args.dataset)
        violations = validate(dataset, tol=args.tol)
        log(f"Checked {len(dataset)} annotations in '{args.dataset}' at tol {args.tol}")
        table = utils.format_table(
            ("annotation", "rule", "magnitude"),
            [(v.annotation_id, v.rule, f"{v.magnitude:.6g}") for v in violations],
        )
        for line in table:
            log(line)
        log(f"{len(violations)} violation(s)")
        return 1 if violations else 0

    def derive(self, args):
        _check_distinct([args.dataset], args.out)
        dataset = load_dataset(args.dataset)  # derivation happens on load
        save_dataset(dataset, args.out)
        log(f"Wrote {len(dataset)} annotations to '{args.out}'")
        return 0

    def evaluate(self, args):
        _check_distinct([args.gt, args.pred], args.out)
        _check_distinct([args.gt, args.pred], args.csv)

        gt = load_dataset(args.gt)
        preds = load_predictions(args.pred)
        config = EvalConfig.from_config(
            self.config, iou_threshold=args.iou, boundary_d=args.boundary_d
        )
        log(f"Evaluating {len(preds)} predictions against {len(gt)} buildings")
        report = evaluate_dataset(preds, gt, config)

        emit_report(report, args.out, args.csv)
        for line in summarize_report(report):
            log(line)
        return 0

    def synth(self, args):
        _check_distinct([args.config, args.noise], args.out)
        _check_distinct([args.config, args.noise, args.out], args.pred_out)

        scene = SceneConfig.from_config(self.config)
        gt = generate_scene(scene)
        save_dataset(gt, args.out)
        log(
            f"Generated {len(gt.images)} image(s) with {len(gt)} buildings "
            f"(seed {scene.seed}) to '{args.out}'"
        )

        if args.pred_out:
            noise = NoiseConfig.from_config(self.config)
            preds = perturb_predictions(gt, noise)
            save_predictions(preds, args.pred_out)
            log(f"Wrote {len(preds)} predictions to '{args.pred_out}'")
        return 0

    def train_toy(self, args):
        angles = RotationAngleSet.from_degrees(args.angles) if args.angles else None
        config = TrainConfig.from_config(
            self.config, angles=angles, fusion=args.fusion, steps=args.steps
        )
        params, report = run_toy(config)
        if args.out:
            save_checkpoint(params, args.out, config.header())
            log(f"Saved parameters to '{args.out}'")

        configurations = [report]
        baseline = (
            self.config.train_baseline
            and not args.no_baseline
            and config.angles.angles != (0.0,)
        )
        if baseline:
            _, base = run_toy(replace(config, angles=RotationAngleSet((0.0,))))
            configurations.append(base)

        result = {"configurations": configurations}
        if baseline and report["mean_epe"] is not None and base["mean_epe"]:
            result["epe_ratio_to_baseline"] = report["mean_epe"] / base["mean_epe"]
            log(f"EPE ratio to the single-angle model: {result['epe_ratio_to_baseline']:.4f}")

        if args.report:
            utils.write_json(result, args.report)
        return 0
