"""Command-line entry point.

Subcommands::

    synth      synthetic scenes + simulated detections -> annotation/detection files
    generate   detections + weak labels + strategy -> pseudo-label file
    evaluate   pseudo labels + annotated dataset -> quality report
    compare    strategy comparison on simulated detections -> table
    em-study   exact vs sampled vs approximated Q on random instances -> table

Exit status: 0 on success, 2 on invalid arguments or input data, 1 otherwise.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import em_oracle as em
from . import io
from .errors import DegeneratePosteriorError, FormatError, ValidationError
from .model import Dataset, ImageRecord
from .pseudolabel import PseudoLabelSet, RpsConfig, hard_threshold, rps_samples, top1_per_label
from .rng import derive_rng
from .synth import (
    DetectorNoise,
    SceneConfig,
    StrategySpec,
    compare_strategies,
    evaluate_sets,
    generate_dataset,
    simulate_detector,
)

STRATEGIES = ("rps", "threshold", "top1")


def _unit_open(name, value):
    if not 0.0 < value < 1.0:
        raise ValidationError(f"--{name} must lie in (0, 1), got {value}")


def _unit_half_open(name, value):
    if not 0.0 < value <= 1.0:
        raise ValidationError(f"--{name} must lie in (0, 1], got {value}")


def _positive(name, value):
    if value < 1:
        raise ValidationError(f"--{name} must be >= 1, got {value}")


def _validate(args) -> None:
    """Check every numeric option before any work starts."""
    if not 0 <= args.seed < 2**64:
        raise ValidationError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
    for name in ("tau", "p_t"):
        if getattr(args, name, None) is not None:
            _unit_open(name.replace("_", "-"), getattr(args, name))
    for name in ("iou_thr", "match_iou"):
        if getattr(args, name, None) is not None:
            _unit_half_open(name.replace("_", "-"), getattr(args, name))
    for name in ("b_prime", "trials", "samples", "n", "instances", "classes", "width", "height"):
        if getattr(args, name, None) is not None:
            _positive(name.replace("_", "-"), getattr(args, name))
    if getattr(args, "scenes", None) is not None and args.scenes < 0:
        raise ValidationError(f"--scenes must be >= 0, got {args.scenes}")
    if getattr(args, "lambda_u", None) is not None and not args.lambda_u >= 0:
        raise ValidationError(f"--lambda-u must be >= 0, got {args.lambda_u}")
    if getattr(args, "n", None) is not None and args.n > em.ENUMERATION_CAP:
        raise ValidationError(f"--n must be <= {em.ENUMERATION_CAP} for exact enumeration")
    if getattr(args, "sigma", None) is not None and args.sigma < 0:
        raise ValidationError("--sigma must be >= 0")
    for name in ("fp_rate", "miss_rate", "dup_rate"):
        value = getattr(args, name, None)
        if value is not None and not 0.0 <= value <= 1.0:
            raise ValidationError(f"--{name.replace('_', '-')} must lie in [0, 1], got {value}")


def _scene_config(args) -> SceneConfig:
    try:
        return SceneConfig(
            width=args.width,
            height=args.height,
            instance_count_range=(args.min_instances, args.max_instances),
            class_count=args.classes,
            box_size_range=(args.min_size, args.max_size),
            overlap_allowed=args.overlap,
        )
    except ValueError as e:
        raise ValidationError(str(e)) from e


def _noise(args) -> DetectorNoise:
    try:
        return DetectorNoise(
            localization_sigma=args.sigma,
            score_calibration=(args.calib_slope, args.calib_offset),
            false_positive_rate=args.fp_rate,
            miss_rate=args.miss_rate,
            duplicate_rate=args.dup_rate,
        )
    except ValueError as e:
        raise ValidationError(str(e)) from e


def cmd_synth(args) -> int:
    cfg = _scene_config(args)
    noise = _noise(args)
    ds = generate_dataset(cfg, args.scenes, args.seed)
    dets = {r.image_id: simulate_detector(r, noise, derive_rng(args.seed, "detector", r.image_id)) for r in ds.records}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_dataset(out / "annotations.json", ds)
    weak_only = Dataset(
        ds.categories,
        tuple(ImageRecord(r.image_id, r.width, r.height, r.weak_labels) for r in ds.records),
        ds.category_ids,
    )
    io.write_dataset(out / "weak_labels.json", weak_only)
    io.write_detections(out / "detections.json", dets)
    return 0


def cmd_generate(args) -> int:
    ds = io.load_annotations(args.annotations)
    dets = io.load_detections(args.detections, ds.num_classes)
    unknown = sorted(set(dets) - {r.image_id for r in ds.records})
    if unknown:
        raise ValidationError(f"detections for images missing from the dataset: {unknown[:5]}")
    sets: list[PseudoLabelSet] = []
    for r in ds.records:
        image_dets = dets.get(r.image_id, [])
        if args.strategy == "rps":
            rng = derive_rng(args.seed, "rps", r.image_id)
            sets.extend(rps_samples(image_dets, r.weak_labels, RpsConfig(args.iou_thr, args.b_prime), rng, r.image_id))
        elif args.strategy == "threshold":
            labels = None if args.unlabeled else r.weak_labels
            sets.append(hard_threshold(image_dets, labels, args.tau, args.iou_thr, r.image_id))
        else:
            sets.append(top1_per_label(image_dets, r.weak_labels, r.image_id))
    io.write_pseudo_labels(args.out, sets, ds)
    return 0


def _report_rows(report, categories) -> list[dict]:
    rows = [{"scope": "all", "tp": report.tp, "fp": report.fp, "fn": report.fn,
             "precision": report.precision, "recall": report.recall, "f1": report.f1,
             "mean_matched_iou": report.mean_matched_iou, "matched_score_mean": report.matched_score_mean}]
    for k, c in report.per_class.items():
        rows.append({"scope": categories[k], **c})
    return rows


REPORT_COLUMNS = ("scope", "tp", "fp", "fn", "precision", "recall", "f1", "mean_matched_iou", "matched_score_mean")
METRIC_NOTE = "pseudo-label precision/recall against ground truth (proxy for downstream detector quality)"


def _emit(args, rows, columns, meta) -> None:
    if args.out:
        io.write_table(args.out, rows, columns, meta)
    else:
        sys.stdout.write(io.dumps({**meta, "rows": rows}))


def cmd_evaluate(args) -> int:
    ds = io.load_annotations(args.annotations)
    weak = [r.image_id for r in ds.records if not r.is_fully_annotated]
    if weak:
        raise ValidationError(f"evaluation needs full annotations; weakly-annotated images: {weak[:5]}")
    sets = io.load_pseudo_labels(args.pseudo)
    try:
        report = evaluate_sets(sets, ds, args.match_iou)
    except ValueError as e:
        raise ValidationError(str(e)) from e
    _emit(args, _report_rows(report, ds.categories), REPORT_COLUMNS,
          {"metric": METRIC_NOTE, "iou_thr": args.match_iou})
    return 0


def cmd_compare(args) -> int:
    if args.annotations:
        ds = io.load_annotations(args.annotations)
    else:
        ds = generate_dataset(_scene_config(args), args.scenes, args.seed)
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]
    bad = [s for s in names if s not in STRATEGIES]
    if bad or not names:
        raise ValidationError(f"--strategies must name some of {STRATEGIES}, got {args.strategies!r}")
    specs = [StrategySpec(n, n, tau=args.tau, iou_thr=args.iou_thr, use_labels=not args.unlabeled) for n in names]
    try:
        table = compare_strategies(ds, _noise(args), specs, args.trials, args.seed, args.match_iou)
    except ValueError as e:
        raise ValidationError(str(e)) from e
    rows = table.rows()
    columns = ["strategy", "kind", "trials"] + [f"{f}_{s}" for f in table.FIELDS for s in ("mean", "std")]
    _emit(args, rows, columns, {"metric": METRIC_NOTE, "iou_thr": args.match_iou, "images": len(ds.records)})
    return 0


def _parse_probs(text: str, n: int, flag: str) -> np.ndarray:
    try:
        values = np.array([float(v) for v in text.split(",")])
    except ValueError as e:
        raise ValidationError(f"{flag}: expected comma-separated numbers, got {text!r}") from e
    if values.size != n:
        raise ValidationError(f"{flag}: expected {n} probabilities, got {values.size}")
    if not np.all((values >= 0) & (values <= 1)):
        raise ValidationError(f"{flag}: probabilities must lie in [0, 1]")
    return values


def _sample_grid(samples: int) -> list[int]:
    grid = []
    size = 100
    while size < samples:
        grid.append(size)
        size *= 10
    return grid + [samples]


def cmd_em_study(args) -> int:
    w = em.LossWeights(lambda_u=args.lambda_u)
    rows = []
    for i in range(args.instances):
        inst_rng = derive_rng(args.seed, "instance", i)
        prior_p = inst_rng.uniform(0.0, 1.0, args.n)
        model_p = inst_rng.uniform(0.0, 1.0, args.n)
        if args.prior:
            prior_p = _parse_probs(args.prior, args.n, "--prior")
        if args.model:
            model_p = _parse_probs(args.model, args.n, "--model")
        prior, model = em.ProposalPosterior(prior_p), em.ProposalPosterior(model_p)
        try:
            exact = em.exact_Q(prior, model, w)
        except DegeneratePosteriorError as e:
            raise ValidationError(f"instance {i}: {e}") from e

        def row(estimator, value, samples=None, assignment=None, in_b=None):
            err = abs(value - exact)
            return {"instance": i, "n": args.n, "estimator": estimator, "samples": samples,
                    "value": value, "abs_error": err,
                    "rel_error": err / abs(exact) if exact != 0 else None,
                    "weighted_value": w.lambda_u * value,
                    "assignment": None if assignment is None else str(assignment), "in_B": in_b}

        rows.append(row("exact", exact))
        for size in _sample_grid(args.samples):
            value = em.mc_Q(prior, model, size, derive_rng(args.seed, "mc", i, size), w)
            rows.append(row("mc", value, samples=size))
        value, t = em.max_Q(prior, model, w=w)
        rows.append(row("max", value, assignment=t, in_b=t.in_B))
        value, t = em.max_Q(prior, model, posterior_only=True, w=w)
        rows.append(row("max_posterior", value, assignment=t, in_b=t.in_B))
        t = em.threshold_assignment(prior, args.p_t)
        rows.append(row("threshold", em.threshold_Q(prior, model, args.p_t, w), assignment=t, in_b=t.in_B))
    columns = ["instance", "n", "estimator", "samples", "value", "abs_error", "rel_error",
               "weighted_value", "assignment", "in_B"]
    _emit(args, rows, columns, {"lambda_u": args.lambda_u, "p_t": args.p_t})
    return 0


def _add_scene_args(p, scenes_default=100):
    p.add_argument("--scenes", type=int, default=scenes_default)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--min-instances", type=int, default=1)
    p.add_argument("--max-instances", type=int, default=5)
    p.add_argument("--min-size", type=float, default=32.0)
    p.add_argument("--max-size", type=float, default=160.0)
    p.add_argument("--overlap", action="store_true", help="allow overlapping instances")


def _add_noise_args(p):
    p.add_argument("--sigma", type=float, default=2.0, help="corner jitter in pixels")
    p.add_argument("--calib-slope", type=float, default=1.0)
    p.add_argument("--calib-offset", type=float, default=0.0)
    p.add_argument("--fp-rate", type=float, default=0.2)
    p.add_argument("--miss-rate", type=float, default=0.1)
    p.add_argument("--dup-rate", type=float, default=0.3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudolabel-kit", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset and simulated detections")
    _add_scene_args(p)
    _add_noise_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("generate", help="produce pseudo labels from detections")
    p.add_argument("--annotations", required=True, help="dataset JSON providing image labels")
    p.add_argument("--detections", required=True)
    p.add_argument("--strategy", choices=STRATEGIES, default="rps")
    p.add_argument("--tau", type=float, default=0.9)
    p.add_argument("--iou-thr", type=float, default=0.5)
    p.add_argument("--b-prime", type=int, default=1, help="RPS draws per image")
    p.add_argument("--unlabeled", action="store_true", help="threshold: ignore image labels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score pseudo labels against ground truth")
    p.add_argument("--pseudo", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--match-iou", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=".json or .csv; JSON to stdout when omitted")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="compare strategies on simulated detections")
    p.add_argument("--annotations", help="annotated dataset; synthetic scenes when omitted")
    _add_scene_args(p)
    _add_noise_args(p)
    p.add_argument("--strategies", default="rps,threshold,top1")
    p.add_argument("--tau", type=float, default=0.9)
    p.add_argument("--iou-thr", type=float, default=0.5)
    p.add_argument("--match-iou", type=float, default=0.5)
    p.add_argument("--unlabeled", action="store_true", help="threshold: ignore image labels")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=".json or .csv; JSON to stdout when omitted")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("em-study", help="exact vs estimated Q on random instances")
    p.add_argument("--n", type=int, default=8, help="proposals per instance")
    p.add_argument("--samples", type=int, default=100_000, help="largest Monte-Carlo sample size")
    p.add_argument("--instances", type=int, default=1)
    p.add_argument("--prior", help="comma-separated prior foreground probabilities")
    p.add_argument("--model", help="comma-separated model foreground probabilities")
    p.add_argument("--p-t", type=float, default=0.9, help="threshold for the thresholded assignment")
    p.add_argument("--lambda-u", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=".json or .csv; JSON to stdout when omitted")
    p.set_defaults(func=cmd_em_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        _validate(args)
        return args.func(args)
    except (ValidationError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        for problem in getattr(e, "problems", [])[1:20]:
            print(f"  {problem}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
