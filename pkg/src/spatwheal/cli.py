"""``spatwheal`` command line: synth, train, predict, detect, eval, saliency, rerun.

Exit codes: 0 success, 2 usage or input error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from . import __version__
from .dataset import DataError, load_case, load_corpus, load_corpus_manifest, manifest_hash
from .detector import DetectConfig, GridError, GridSpec, detection_json
from .metrics import EvalConfig, table_report
from .pipeline import detect_case, evaluate_maps, predict_all, render_overlay
from .saliency import aggregate, aggregate_json, image_scores, scores_csv, stack_gradients
from .synth import SynthConfig, SynthConfigError, generate_corpus
from .trainer import TrainConfig, predict, stratified_split, train
from .unet import MODES, ConfigError, UNetModel

log = logging.getLogger("spatwheal")

EXIT_USAGE = 2
EXIT_INVARIANT = 3


class UsageError(Exception):
    pass


def _read_json(path) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def _write_run(out: Path, args: argparse.Namespace, argv: list[str], config: dict[str, Any]) -> None:
    doc = {"command": args.command, "argv": argv, "seed": getattr(args, "seed", None),
           "config": config, "version": __version__}
    (out / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args) -> Path:
    root = args.dataset or os.environ.get("SPAT_DATA_DIR")
    if not root:
        raise UsageError("no dataset given (use --dataset or set SPAT_DATA_DIR)")
    return Path(root)


def _parse_grid(text: str | None) -> GridSpec:
    if not text:
        return GridSpec()
    parts: dict[str, tuple[float, float, float]] = {}
    for item in text.split(","):
        try:
            key, rng = item.split("=")
            lo, hi, step = (float(v) for v in rng.split(":"))
        except ValueError:
            raise UsageError(f"bad --grid item {item!r}; expected name=lo:hi:step") from None
        if key not in ("tx", "ty", "theta"):
            raise UsageError(f"unknown grid axis {key!r}")
        parts[key] = (lo, hi, step)
    return GridSpec(**parts)


def _detect_config(args) -> DetectConfig:
    return DetectConfig(grid=_parse_grid(args.grid), d_gate_mm=args.gate_mm)


def _eval_config(args) -> EvalConfig:
    kw: dict[str, Any] = {"area_threshold_mm2": args.area_threshold_mm2}
    if args.iou_thresholds:
        try:
            kw["iou_thresholds"] = [float(v) for v in args.iou_thresholds.split(",")]
        except ValueError:
            raise UsageError("--iou-thresholds takes comma-separated numbers") from None
    return EvalConfig(**kw)


def _load_model(path) -> UNetModel:
    p = Path(path)
    if p.is_dir():
        p = p / "model.spatw"
    if not p.is_file():
        raise UsageError(f"no checkpoint at {p}")
    return UNetModel.load(p)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, argv) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    cfg = SynthConfig.from_dict(_read_json(args.config)) if args.config else SynthConfig()
    doc = generate_corpus(cfg, args.n, args.seed, args.out)
    h = manifest_hash(args.out)
    print(h)
    log.info("wrote %d cases to %s", len(doc["cases"]), args.out)
    return 0


def _train_config(args) -> TrainConfig:
    base: dict[str, Any] = {}
    if args.config:
        doc = _read_json(args.config)
        base = doc.get("config", doc) if "command" in doc else doc
    for key in ("epochs", "batch_size", "lr", "mode", "seed", "hidden_features", "depth", "split_ratio"):
        v = getattr(args, key, None)
        if v is not None:
            base[key] = v
    if args.size:
        base["height"], base["width"] = args.size
    return TrainConfig.from_dict(base)


def cmd_train(args, argv) -> int:
    cfg = _train_config(args)
    cases = load_corpus(_dataset(args))
    tr, va = stratified_split(cases, cfg.split_ratio, cfg.seed)
    out = _out_dir(args)
    log_path = out / "train_log.jsonl"
    log_path.write_text("")

    def on_epoch(rec):
        with open(log_path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    model, hist = train(tr, cfg, va, on_epoch=on_epoch)
    model.save(out / "model.spatw")
    (out / "split.json").write_text(json.dumps(
        {"train": [c.case_id for c in tr], "val": [c.case_id for c in va]}, indent=1) + "\n")
    (out / "history.json").write_text(json.dumps(hist.records(), indent=1) + "\n")
    _write_run(out, args, argv, cfg.to_dict())
    print(f"final loss {hist.train_loss[-1]:.6f}" +
          ("" if hist.val_dice[-1] is None else f"  val dice {hist.val_dice[-1]:.4f}"))
    return 0


def cmd_predict(args, argv) -> int:
    model = _load_model(args.model)
    case = load_case(args.case)
    if args.mode and args.mode != model.config.mode:
        raise UsageError(f"model is {model.config.mode}, --mode says {args.mode}")
    prob = predict(model, case.stack)
    out = _out_dir(args)
    np.save(out / "map.npy", prob)
    Image.fromarray(np.rint(prob * 255).astype(np.uint8), mode="L").save(out / "map.png")
    _write_run(out, args, argv, {"model": str(args.model), "case": str(args.case)})
    return 0


def cmd_detect(args, argv) -> int:
    case = load_case(args.case)
    if args.map:
        prob = np.load(args.map)
        if prob.shape != case.stack.dims:
            raise UsageError(f"map {prob.shape} does not match case dims {case.stack.dims}")
    elif args.model:
        prob = predict(_load_model(args.model), case.stack)
    else:
        raise UsageError("detect needs --map or --model")
    det = detect_case(prob, case, _detect_config(args))
    out = _out_dir(args)
    (out / "detection.json").write_text(detection_json(det))
    render_overlay(case, det).save(out / "overlay.png")
    _write_run(out, args, argv, {"case": str(args.case), "map": args.map, "model": args.model,
                                 "gate_mm": args.gate_mm, "grid": args.grid})
    n = sum(m is not None for m in det.match.matches)
    print(f"{n} of 12 pricks matched; transform {det.match.transform.to_dict()}")
    return 0


def _eval_cases(root: Path, model_path: str, split: str):
    cases = load_corpus(root)
    if split == "all":
        return cases
    sp = Path(model_path)
    sp = (sp if sp.is_dir() else sp.parent) / "split.json"
    if not sp.is_file():
        if split == "val":
            raise UsageError(f"--split val needs {sp}")
        return cases
    ids = set(json.loads(sp.read_text())["val"])
    return [c for c in cases if c.case_id in ids]


def cmd_eval(args, argv) -> int:
    root = _dataset(args)
    if args.dry_run:
        doc = load_corpus_manifest(root)
        cases = load_corpus(root)
        print(f"{len(cases)} cases OK ({len(doc['cases'])} listed); manifest {manifest_hash(root)}")
        return 0
    if not args.model:
        raise UsageError("eval needs at least one --model")
    modes = args.mode or []
    if modes and len(modes) != len(args.model):
        raise UsageError("give one --mode per --model or none")
    ecfg, dcfg = _eval_config(args), _detect_config(args)
    cases = _eval_cases(root, args.model[0], args.split)
    if not cases:
        raise UsageError("no cases to evaluate (try --split all)")
    out = _out_dir(args)
    reports = []
    for i, mpath in enumerate(args.model):
        model = _load_model(mpath)
        if modes and modes[i] != model.config.mode:
            raise UsageError(f"model {mpath} is {model.config.mode}, --mode says {modes[i]}")
        probs = predict_all(model, cases, args.threads)
        rep, dets = evaluate_maps(probs, cases, model.config.mode, ecfg, dcfg, args.threads)
        mode = model.config.mode
        (out / f"report_{mode}.json").write_text(rep.to_json())
        (out / f"curve_{mode}.csv").write_text(rep.curve_csv())
        if not args.no_overlays:
            od = out / f"overlays_{mode}"
            od.mkdir(exist_ok=True)
            for case, det in zip(cases, dets):
                render_overlay(case, det).save(od / f"{case.case_id}.png")
        reports.append(rep)
    table = table_report(*reports)
    (out / "table.txt").write_text(table)
    _write_run(out, args, argv, {"models": args.model, "eval": reports[0].config,
                                 "gate_mm": args.gate_mm, "grid": args.grid, "split": args.split})
    print(table, end="")
    return 0


def cmd_saliency(args, argv) -> int:
    model = _load_model(args.model)
    if model.config.mode != "spat32":
        raise UsageError("saliency needs a spat32 model")
    cases = _eval_cases(_dataset(args), args.model, args.split)
    if not cases:
        raise UsageError("no cases to score")
    scores = []
    for c in cases:
        g = stack_gradients(model, c.stack, None if args.no_gt else c.gt_mask())
        scores.append(image_scores(g))
    out = _out_dir(args)
    ids = [c.case_id for c in cases]
    (out / "scores.csv").write_text(scores_csv(ids, scores))
    (out / "aggregate.json").write_text(aggregate_json(aggregate(scores)))
    _write_run(out, args, argv, {"model": args.model, "target": "prediction" if args.no_gt else "ground_truth"})
    print(f"scored {len(cases)} cases")
    return 0


def cmd_rerun(args, argv) -> int:
    doc = _read_json(args.run_file)
    if "argv" not in doc:
        raise UsageError(f"{args.run_file} is not a run.json")
    return main(doc["argv"])


# ---------------------------------------------------------------------------


def _grid_type(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("size must look like 192x128") from None
    return h, w


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatwheal", description="Allergy wheal detection on SPAT image stacks.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        if out:
            sp.add_argument("--out", required=True)
        sp.add_argument("--threads", type=int, default=1)

    def registration_flags(sp):
        sp.add_argument("--grid", help="e.g. tx=-10:10:0.5,ty=-10:10:0.5,theta=-5:5:0.5")
        sp.add_argument("--gate-mm", type=float, default=5.0)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    common(s)
    s.add_argument("--n", type=int, required=True)
    s.set_defaults(func=cmd_synth, seed=0)

    s = sub.add_parser("train", help="train the pixel classifier")
    common(s)
    s.add_argument("--dataset")
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--hidden-features", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--split-ratio", type=float)
    s.add_argument("--size", type=_grid_type, help="target HxW, e.g. 192x128")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="probability map for one case")
    common(s)
    s.add_argument("--model", required=True)
    s.add_argument("--case", required=True)
    s.add_argument("--mode", choices=MODES)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("detect", help="threshold, register and match a saved map or a model prediction")
    common(s)
    s.add_argument("--case", required=True)
    s.add_argument("--map", help="probability map .npy from predict")
    s.add_argument("--model")
    registration_flags(s)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", help="evaluate one or two models; two give the comparison table")
    common(s, out=False)
    s.add_argument("--out", default="eval_out")
    s.add_argument("--dataset")
    s.add_argument("--model", action="append")
    s.add_argument("--mode", action="append", choices=MODES)
    s.add_argument("--split", choices=("auto", "val", "all"), default="auto")
    s.add_argument("--iou-thresholds")
    s.add_argument("--area-threshold-mm2", type=float, default=15.9)
    s.add_argument("--no-overlays", action="store_true")
    s.add_argument("--dry-run", action="store_true", help="only check that the dataset loads")
    registration_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("saliency", help="per-image sensitivity scores")
    common(s)
    s.add_argument("--model", required=True)
    s.add_argument("--dataset")
    s.add_argument("--split", choices=("auto", "val", "all"), default="auto")
    s.add_argument("--no-gt", action="store_true", help="use the model's own prediction as target")
    s.set_defaults(func=cmd_saliency)

    s = sub.add_parser("rerun", help="replay the command recorded in a run.json")
    s.add_argument("run_file")
    s.set_defaults(func=cmd_rerun)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (UsageError, DataError, ConfigError, SynthConfigError, GridError, ValueError, OSError) as exc:
        print(f"spatwheal {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AssertionError, FloatingPointError) as exc:
        print(f"spatwheal {args.command}: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
