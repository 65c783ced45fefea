"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/model error. Diagnostics go to
stderr; results go to stdout. Every command that consumes randomness takes a
seed, so reruns with identical inputs produce byte-identical outputs.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from biqa import data as dat
from biqa import gradcam as gc
from biqa import gradcheck
from biqa import metrics as mx
from biqa import model as mdl
from biqa import training as tr
from biqa.errors import BiqaError, LengthMismatch


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser():
    p = _Parser(prog="biqa", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic distortion dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--bases", type=int, default=100, help="number of clean base images")
    s.add_argument("--levels", type=int, default=5, help="distortion levels per base")
    s.add_argument("--size", type=int, default=64, help="image side length in pixels")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train", help="train a model on a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model-config", required=True, help="model description (JSON)")
    s.add_argument("--train-config", required=True, help="recipe (key=value lines)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=None, help="override the config seed")

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--report", help="write the machine-readable report here")
    s.add_argument("--dump-predictions", help="write path,truth,prediction rows here")

    s = sub.add_parser("predict", help="predict the quality of one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)

    s = sub.add_parser("gradcam", help="export an attribution heatmap")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--layer", default=None, help="conv activation name (default: last of stream A)")
    s.add_argument("--out", required=True)
    s.add_argument("--overlay", action="store_true", help="blend onto the image as red")

    s = sub.add_parser("metrics", help="score a prediction file against a truth file")
    s.add_argument("--truth", required=True, help="one float per line")
    s.add_argument("--pred", required=True, help="one float per line")

    s = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    s.add_argument("--ops", default="all", help="comma-separated op names, or 'all'")
    s.add_argument("--seed", type=int, default=0, help="offset for the random check inputs")

    return p


def _read_score_file(path):
    values = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError as e:
            raise LengthMismatch(f"{path}:{lineno}: not a number: {line!r}") from e
    return np.array(values, dtype=np.float64)


def _cmd_synth(args):
    manifest, _ = dat.synth_dataset(args.out, args.bases, args.levels, args.size, args.seed)
    print(f"wrote {len(manifest)} images under {args.out}")
    print(f"manifest: {Path(args.out) / 'manifest.txt'}")
    print(f"regions sidecar: {Path(args.out) / 'regions.txt'}")
    return 0


def _cmd_train(args):
    cfg = mdl.ModelConfig.from_json_file(args.model_config)
    train_cfg = tr.parse_train_config(args.train_config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    manifest = dat.load_manifest(args.manifest)

    if all(s.split for s in manifest.samples):
        splits = dat.split_by_tag(manifest)
    else:
        splits = dat.split(manifest, seed=train_cfg.seed)
    train_m, val_m, test_m = splits

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, m in zip(("train", "val", "test"), splits):
        m.write(out / f"{name}.txt")

    model = mdl.build_model(cfg, seed=train_cfg.seed)
    history, meta = tr.train(model, train_m, val_m, train_cfg)
    ckpt = out / "best.ckpt"
    mdl.save_checkpoint(model, ckpt, meta)
    history.write(out / "history.csv")

    report, _ = tr.evaluate(model, test_m)
    print(f"best epoch {meta['epoch']} (validation loss {meta['best_val_loss']:.6f})")
    print(f"checkpoint: {ckpt}")
    print(f"history: {out / 'history.csv'}")
    print("test split metrics:")
    print(report.to_text())
    return 0


def _cmd_eval(args):
    model, _ = mdl.load_checkpoint(args.checkpoint)
    manifest = dat.load_manifest(args.manifest)
    report, rows = tr.evaluate(model, manifest)
    print(report.to_text())
    if args.report:
        Path(args.report).write_text(report.to_csv() + "\n")
    if args.dump_predictions:
        lines = ["path,truth,prediction"]
        lines += [f"{p},{t!r},{y!r}" for p, t, y in rows]
        Path(args.dump_predictions).write_text("\n".join(lines) + "\n")
    return 0


def _cmd_predict(args):
    model, _ = mdl.load_checkpoint(args.checkpoint)
    img = dat.load_image_for_model(args.image, model.config.input_size)
    preds = model.predict(img[None, ...], paths=[args.image])
    for v in preds[0]:
        print(repr(float(v)))
    return 0


def _cmd_gradcam(args):
    model, _ = mdl.load_checkpoint(args.checkpoint)
    img = dat.load_image_for_model(args.image, model.config.input_size)
    heatmap = gc.gradcam(model, img, layer=args.layer)
    gc.export_heatmap(heatmap, args.out, image=img, overlay=args.overlay)
    print(f"layer: {heatmap.layer}")
    print(f"wrote {args.out}")
    return 0


def _cmd_metrics(args):
    truth = _read_score_file(args.truth)
    pred = _read_score_file(args.pred)
    if truth.size != pred.size:
        raise LengthMismatch(f"{truth.size} truth lines vs {pred.size} prediction lines")
    print(mx.compute_report(truth, pred).to_text())
    return 0


def _cmd_gradcheck(args):
    rows = gradcheck.run_suite(seed=args.seed)
    if args.ops != "all":
        wanted = {o.strip() for o in args.ops.split(",")}
        unknown = wanted - {name for name, _, _ in rows}
        if unknown:
            raise BiqaError(f"unknown ops: {sorted(unknown)}")
        rows = [r for r in rows if r[0] in wanted]
    ok = True
    print(f"{'op':24s}{'max rel err':>14s}{'tolerance':>12s}")
    for name, err, tol in rows:
        ok = ok and err <= tol
        print(f"{name:24s}{err:14.3e}{tol:12.0e}  {'ok' if err <= tol else 'FAIL'}")
    if not ok:
        raise BiqaError("gradient check failed")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "gradcam": _cmd_gradcam,
    "metrics": _cmd_metrics,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    try:
        return _COMMANDS[args.command](args)
    except (BiqaError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
