"""``seqdx`` command line: synth, train, eval, predict, selfcheck, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Progress goes to stderr; results go to stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointFormatError, read_checkpoint, save_checkpoint
from .config import ConfigSchemaError, load_config
from .data import DISEASES, IMAGE_SUFFIXES, PatientRecord, filter_patients, load_dataset, split_train_val
from .model import ConfigError, forward_sequence, init_model
from .synth import CLINICAL_PREVALENCE, SynthConfig, generate_dataset
from .tensor import no_grad
from .trainer import TrainingAborted, evaluate, output_names, patient_images, train

log = logging.getLogger("seqdx")


class UsageError(Exception):
    pass


def _threshold(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("threshold must lie strictly between 0 and 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqdx", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic patient dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--patients", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prevalence", type=float, nargs="+", default=None,
                   help="one value (single disease) or five (multi-label)")
    s.add_argument("--multi", action="store_true", help="five diseases at clinical-survey prevalence")
    s.add_argument("--image-size", type=int, default=32)
    s.add_argument("--min-images", type=int, default=3)
    s.add_argument("--max-images", type=int, default=12)
    s.add_argument("--noise-sigma", type=float, default=0.02)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--resume", default=None)
    t.add_argument("--out-history", default="history.csv")
    t.add_argument("--out-ckpt", default="model.sqdx")
    t.add_argument("--figures", default=None, help="directory for training-curve PNGs")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--threshold", type=_threshold, default=0.5)
    e.add_argument("--disease", default="hemorrhage", choices=DISEASES,
                   help="label column for single-output checkpoints")
    e.add_argument("--json", action="store_true")

    q = sub.add_parser("predict", help="probabilities for one patient directory")
    q.add_argument("--patient", required=True)
    q.add_argument("--ckpt", required=True)
    q.add_argument("--json", action="store_true")

    c = sub.add_parser("selfcheck", help="run gradient and persistence oracles")
    c.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="render figures from a history CSV")
    r.add_argument("--history", required=True)
    r.add_argument("--out", required=True)
    return p


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    if args.multi:
        prevalence = CLINICAL_PREVALENCE
    elif args.prevalence:
        prevalence = tuple(args.prevalence)
    else:
        prevalence = (0.3,)
    cfg = SynthConfig(num_patients=args.patients, image_size=args.image_size,
                      min_images=args.min_images, max_images=args.max_images,
                      prevalence=prevalence, noise_sigma=args.noise_sigma)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    records, manifest = generate_dataset(cfg, args.seed, args.out)
    labels = np.array([r.labels for r in records])
    _emit({"patients": len(records), "images": int(sum(r.num_images for r in records)),
           "positive_rate": labels.mean(axis=0).round(4).tolist(), "blobs": len(manifest),
           "out": str(args.out)})
    return 0


def cmd_train(args) -> int:
    try:
        run = load_config(args.config, args.set)
    except ConfigSchemaError as exc:
        raise UsageError(str(exc)) from None
    tc = run.train_config()
    records = filter_patients(load_dataset(args.data, columns=run.label_columns()), run["max_images"])
    split = split_train_val(records, run["val_fraction"], tc.seed)
    start = 0
    if args.resume:
        model, state = read_checkpoint(args.resume)
        start = int(state.get("next_epoch", 0))
        log.info("resuming from %s at epoch %d", args.resume, start)
    else:
        model = init_model(run.model_config(), tc.seed)
    log.info("%d train / %d validation patients, %d parameters",
             len(split.train), len(split.validation), model.num_parameters())

    def progress(rec):
        val = ""
        if rec.validation is not None:
            val = f" val_loss {rec.validation.mean_loss:.4f} val_acc {rec.validation.metrics.combined_accuracy:.3f}"
        print(f"epoch {rec.epoch:4d} loss {rec.train_loss:.4f} train_acc "
              f"{rec.train.combined_accuracy:.3f}{val} ({rec.seconds:.1f}s)", file=sys.stderr, flush=True)

    t0 = time.perf_counter()
    history = train(model, split, tc, start_epoch=start, callback=progress)
    history.to_csv(args.out_history)
    save_checkpoint(model, args.out_ckpt, {"next_epoch": history.epochs[-1].epoch + 1, "seed": tc.seed})
    figures = []
    if args.figures:
        from .plotting import render_report
        figures = [str(p) for p in render_report(args.out_history, args.figures)]
    last = history.epochs[-1]
    _emit({"epochs": len(history.epochs), "final_train_loss": last.train_loss,
           "final_train_acc": last.train.combined_accuracy,
           "final_val_acc": None if last.validation is None else last.validation.metrics.combined_accuracy,
           "history": str(args.out_history), "checkpoint": str(args.out_ckpt),
           "figures": figures, "seconds": round(time.perf_counter() - t0, 2)})
    return 0


def cmd_eval(args) -> int:
    model, _ = read_checkpoint(args.ckpt)
    n = model.config.num_outputs
    columns = list(DISEASES) if n == 5 else [args.disease]
    records = load_dataset(args.data, columns=columns)
    result = evaluate(model, records, args.threshold)
    names = output_names(n) if n == 5 else columns
    per = [{"disease": name, **m.as_dict()} for name, m in zip(names, result.metrics.per_output)]
    if args.json:
        _emit({"diseases": per, "combined_accuracy": result.metrics.combined_accuracy,
               "mean_loss": result.mean_loss, "patients": len(records), "threshold": args.threshold})
    else:
        print(f"{'disease':<12}{'accuracy':>10}{'precision':>10}{'recall':>10}{'f1':>10}")
        for d in per:
            flag = " *" if d["degenerate"] else ""
            print(f"{d['disease']:<12}{d['accuracy']:>10.4f}{d['precision']:>10.4f}"
                  f"{d['recall']:>10.4f}{d['f1']:>10.4f}{flag}")
        print(f"combined accuracy {result.metrics.combined_accuracy:.4f} over {len(records)} patients; "
              f"mean loss {result.mean_loss:.4f}")
    return 0


def cmd_predict(args) -> int:
    model, _ = read_checkpoint(args.ckpt)
    pdir = Path(args.patient)
    refs = sorted(p for p in pdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if pdir.is_dir() else []
    if not refs:
        raise FileNotFoundError(f"no images in {pdir}")
    rec = PatientRecord(pdir.name, refs, np.zeros(model.config.num_outputs, dtype=np.int64))
    with no_grad():
        pred = forward_sequence(model, patient_images(rec, model.config.image_size))
    names = output_names(model.config.num_outputs)
    probs = [float(v) for v in pred.final_probs.data]
    if args.json:
        _emit({"patient": rec.patient_id, "images": len(refs), "probs": dict(zip(names, probs)),
               "per_step": [[float(v) for v in p.data] for p in pred.per_step_probs]})
    else:
        for name, v in zip(names, probs):
            print(f"{name} {v:.6f}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck
    t0 = time.perf_counter()
    results = run_selfcheck(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<26} max deviation {r.deviation:.3e}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        for r in failed:
            print(f"failing check: {r.name} (max deviation {r.deviation:.3e})", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    from .plotting import render_report
    paths = render_report(args.history, args.out)
    _emit({"figures": [str(p) for p in paths]})
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "selfcheck": cmd_selfcheck, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"seqdx {args.command}: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"seqdx train: aborted: {exc}", file=sys.stderr)
        return 1
    except (OSError, CheckpointFormatError, ValueError) as exc:
        print(f"seqdx {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
