"""Command-line entry point: ``r2r train|eval|explain|gradcheck``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import R2RError

log = logging.getLogger("r2rproto")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _echo(effective: dict) -> None:
    print("config: " + json.dumps(effective, sort_keys=True), file=sys.stderr)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_dir(out: str | None, seed: int) -> Path:
    if out:
        return Path(out)
    return Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{seed}"


def _load_dataset(cfg: dict):
    from .data import SYNTHETIC_CLASSES, generate_synthetic, load_manifest

    d = cfg["data"]
    if d["synthetic"] is not None:
        n = int(d["synthetic"])
        return generate_synthetic(n, int(d["synthetic_size"]), int(d["synthetic_seed"])), list(SYNTHETIC_CLASSES)
    if d["manifest"]:
        man = load_manifest(d["manifest"])
        return man.load(), man.class_names
    raise R2RError("no dataset: pass --synthetic N or --manifest CSV (or data.manifest in the config)")


# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .checkpoint import checkpoint_crc, save_checkpoint
    from .model import Model
    from .plotting import plot_training
    from .training import OptimState, train

    overrides = list(args.set or [])
    for flag, key in (("synthetic", "data.synthetic"), ("manifest", "data.manifest"), ("epochs", "training.epochs"),
                      ("batch_size", "training.batch_size"), ("seed", "seed"), ("out", "output_dir")):
        val = getattr(args, flag)
        if val is not None:
            overrides.append(f"{key}={json.dumps(val)}")
    cfg = cfgmod.load_run_config(args.config, overrides)
    samples, class_names = _load_dataset(cfg)
    mcfg = cfgmod.model_config(cfg)
    mcfg.n_classes = len(class_names)
    mcfg.input_channels = samples[0].image.shape[0] if samples else mcfg.input_channels
    cfg["model"] = {**mcfg.to_dict()}
    run = _run_dir(cfg["output_dir"], cfg["seed"])
    cfg["output_dir"] = str(run)
    _echo(cfg)
    run.mkdir(parents=True, exist_ok=True)
    _write_json(run / "config.json", cfg)

    model = Model(mcfg)
    t = cfg["training"]
    state = OptimState(lr0=t["lr0"], weight_decay=t["weight_decay"])
    ckpt = run / "checkpoint.r2rp"
    report = train(model, samples, t["epochs"], t["batch_size"], cfg["seed"], lr_min=t["lr_min"],
                   val_fraction=t["val_fraction"], checkpoint_path=ckpt, state=state)
    save_checkpoint(model, state, run / "last.r2rp")
    out = report.to_json()
    out["class_names"] = class_names
    out["checkpoint"] = str(ckpt)
    out["checkpoint_crc32"] = checkpoint_crc(ckpt)
    _write_json(run / "report.json", out)
    plot_training(report, run / "training.png")
    print(json.dumps({"run_dir": str(run), "best_epoch": report.best_epoch,
                      "best_val_mean_auc": report.val_mean_auc[report.best_epoch],
                      "checkpoint_crc32": out["checkpoint_crc32"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .explain import localization_eval
    from .metrics import MetricsReport, mean_auc, per_class_auc
    from .plotting import plot_per_class_auc
    from .training import predict

    overrides = list(args.set or [])
    if args.synthetic is not None:
        overrides.append(f"data.synthetic={args.synthetic}")
        overrides.append(f"data.synthetic_seed={args.synthetic_seed}")
    if args.manifest is not None:
        overrides.append(f"data.manifest={json.dumps(args.manifest)}")
    cfg = cfgmod.load_run_config(args.config, overrides)
    model, _ = load_checkpoint(args.checkpoint)
    cfg["model"] = model.config.to_dict()
    run = Path(args.out) if args.out else Path(args.checkpoint).parent
    cfg["output_dir"] = str(run)
    _echo(cfg)
    samples, class_names = _load_dataset(cfg)
    if not samples:
        raise R2RError("dataset is empty")
    if len(class_names) != model.config.n_classes:
        raise R2RError(
            f"dataset has {len(class_names)} classes but checkpoint was trained for {model.config.n_classes}"
        )
    probs = predict(model, samples)
    labels = np.stack([s.labels for s in samples])
    per = per_class_auc(probs, labels)
    report = MetricsReport(class_names, per, mean_auc(per))
    if any(s.gt_region for s in samples):
        e = cfg["explain"]
        loc = localization_eval(model, samples, mode=e["activity"])
        report.iou_rate = loc["iou_rate"]
        report.pointing_rate = loc["pointing_rate"]
        report.extra["mean_iou"] = loc["mean_iou"]
    out = report.to_json()
    _write_json(run / "metrics.json", out)
    plot_per_class_auc(class_names, per, run / "per_class_auc.png")
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def _blocks_for_stage(model, stage: str) -> list[int]:
    layers = model.attention_layers()
    if stage == "all":
        return list(range(len(layers)))
    if stage == "final":
        return [len(layers) - 1]
    try:
        s = int(stage)
    except ValueError:
        raise R2RError(f"--stage must be an index, 'final' or 'all', got {stage!r}") from None
    picked = [i for i, (si, _, _) in enumerate(layers) if si == s]
    if not picked:
        raise R2RError(f"--stage {s} out of range (model has {len(model.stages)} stages)")
    return picked


def cmd_explain(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_image
    from .explain import explanation_from_trace, render_overlay, select_active_masks
    from .model import forward
    from .plotting import plot_explanations
    from .tensor import Tensor, no_grad

    cfg = cfgmod.load_run_config(args.config, list(args.set or []) + [
        f"explain.topk={args.topk}" if args.topk is not None else "explain.topk=1",
        f"explain.activity={json.dumps(args.activity)}",
        f"explain.stage={json.dumps(args.stage)}",
    ])
    model, _ = load_checkpoint(args.checkpoint)
    cfg["model"] = model.config.to_dict()
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / "explain"
    cfg["output_dir"] = str(out_dir)
    _echo(cfg)
    e = cfg["explain"]
    image = read_image(args.image)
    blocks = _blocks_for_stage(model, str(e["stage"]))
    layers = model.attention_layers()
    for b in blocks:
        L = layers[b][2].L
        if e["topk"] > L:
            raise R2RError(f"--topk {e['topk']} exceeds the {L} masks of stage {layers[b][0]} block {layers[b][1]}")
    with no_grad():
        _, traces = forward(model, Tensor(image), capture_traces=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    print(f"{'stage':>5} {'block':>5} {'rank':>4} {'mask':>4} {'activity':>12} {'flat':>5}  overlay")
    for b in blocks:
        si, bi, _ = layers[b]
        expl = explanation_from_trace(traces[b], si, bi, mode=e["activity"])
        picked = select_active_masks(expl, e["topk"], model.config.input_size)
        for rank, am in enumerate(picked):
            ppm, _ = render_overlay(image, am.heatmap, out_dir / f"{stem}_s{si}b{bi}_r{rank}_m{am.index}.ppm")
            print(f"{si:>5} {bi:>5} {rank:>4} {am.index:>4} {am.activity:>12.6g} {str(am.flat):>5}  {ppm}")
        plot_explanations(image, picked, out_dir / f"{stem}_s{si}b{bi}.png",
                          title=f"stage {si} block {bi} ({e['activity']})")
        _write_json(out_dir / f"{stem}_s{si}b{bi}.json", {
            "stage": si, "block": bi, "activity": expl.activity.tolist(),
            "attn": expl.attn.tolist(), "selected": [am.index for am in picked],
        })
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    _echo({"seed": args.seed, "tolerance": TOLERANCE})
    t0 = time.perf_counter()
    errors = run_gradcheck(args.seed)
    ok = True
    for group, err in errors.items():
        status = "ok" if err <= TOLERANCE else "FAIL"
        ok &= err <= TOLERANCE
        print(f"{group:<16} max_rel_err={err:.3e} {status}")
    print(f"elapsed {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    if not ok:
        print(f"error: gradient check exceeded tolerance {TOLERANCE:g}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="r2r", description="Region-to-region prototype attention: train, evaluate, explain, verify.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--out", help="output directory")

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--synthetic", type=int, metavar="N", help="train on N generated samples")
    t.add_argument("--manifest", help="CSV manifest (image,<class_1>,...)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class AUC (+ localization on synthetic data)")
    common(e)
    e.add_argument("checkpoint")
    e.add_argument("--manifest")
    e.add_argument("--synthetic", type=int, metavar="N")
    e.add_argument("--synthetic-seed", type=int, default=1, dest="synthetic_seed")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="export the most active masks for one image")
    common(x)
    x.add_argument("checkpoint")
    x.add_argument("image", help="PGM/PPM image")
    x.add_argument("--stage", default="final", help="stage index, 'final' or 'all'")
    x.add_argument("--topk", type=int, default=1)
    x.add_argument("--activity", choices=("mass", "argmax"), default="mass")
    x.set_defaults(func=cmd_explain)

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from threadpoolctl import threadpool_limits

    from .data import threads_from_env

    try:
        with threadpool_limits(limits=threads_from_env()):
            return args.func(args)
    except (R2RError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
