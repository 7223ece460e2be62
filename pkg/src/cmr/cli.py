"""``cmr`` command-line entry point."""
from __future__ import annotations

import argparse
import os
import sys
import time
from contextlib import ExitStack
from pathlib import Path

import numpy as np

from cmr import container, __version__


class CliError(Exception):
    pass


def _threads():
    raw = os.environ.get("CMR_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"CMR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"CMR_THREADS must be a positive integer, got {raw!r}")
    return n


def _require_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def load_config(path, overrides):
    from cmr.config import TrainConfig, parse_pairs

    cfg = TrainConfig()
    if path is not None:
        p = _require_file(path, "config file")
        cfg = cfg.with_overrides(parse_pairs(p.read_text(encoding="utf-8"), str(p)))
    pairs = []
    for item in overrides or ():
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return cfg.with_overrides(pairs)


# ------------------------------------------------------------------ commands

def cmd_gen_model(args):
    from cmr.assets import save_assets
    from cmr.bodymodel import make_mini_model
    from cmr.meshgraph import coarsen

    model = make_mini_model(seed=args.seed, n_vertices=args.vertices, n_joints=args.joints,
                            n_betas=args.betas)
    pair = coarsen(model.template, args.factor)
    digest = save_assets(args.out, model, pair)
    print(f"wrote {args.out}: N={model.n_vertices} N_c={pair.coarse_mesh.n_vertices} "
          f"J={model.n_joints} betas={model.n_betas} sha256={digest}")


def cmd_gen_data(args):
    from cmr.assets import load_assets
    from cmr.synth import generate_dataset

    model_file = _require_file(args.model, "model file")
    model, _ = load_assets(model_file)
    m = generate_dataset(model, args.n, args.seed, args.weak_fraction, args.out, model_file,
                         val_fraction=args.val_fraction, resolution=args.resolution, mode=args.mode)
    n_val = len(m.entries_for("val"))
    n_weak = sum(e.weak for e in m.entries)
    print(f"wrote {Path(args.out) / 'manifest.txt'}: {m.n} samples "
          f"({m.n - n_val} train, {n_val} val, {n_weak} weak) digest={m.digest}")


def _log_to(path, echo_every):
    fh = open(path, "w", encoding="utf-8")

    def log(line):
        fh.write(line + "\n")
        if echo_every and int(line.split()[0]) % echo_every == 0:
            print(line, flush=True)

    return fh, log


def cmd_train(args):
    from cmr import trainer

    cfg = load_config(args.config, args.set)
    if args.data:
        cfg = cfg.with_overrides([("train.data", args.data)])
    if not cfg.train.data:
        raise CliError("no dataset given; set train.data in the config or pass --data")
    _require_file(cfg.train.data, "dataset manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    stage1 = None
    if args.stage in ("1", "both"):
        fh, log = _log_to(out / "train_stage1.log", args.echo_every)
        with fh:
            t0 = time.perf_counter()
            stage1 = trainer.train_stage1(cfg, log=log, checkpoint_dir=ckpt_dir)
        digest = trainer.save_checkpoint(out / "stage1.cmrk", stage1)
        print(f"stage 1: {stage1.step} steps in {time.perf_counter() - t0:.1f}s -> "
              f"{out / 'stage1.cmrk'} sha256={digest}")
    if args.stage in ("2", "both"):
        if stage1 is None:
            src = Path(args.stage1) if args.stage1 else out / "stage1.cmrk"
            stage1 = trainer.load_checkpoint(_require_file(src, "stage-1 checkpoint"))
        fh, log = _log_to(out / "train_stage2.log", args.echo_every)
        with fh:
            t0 = time.perf_counter()
            stage2 = trainer.train_stage2(cfg, stage1, log=log, checkpoint_dir=ckpt_dir)
        digest = trainer.save_checkpoint(out / "stage2.cmrk", stage2)
        print(f"stage 2: {stage2.step} steps in {time.perf_counter() - t0:.1f}s -> "
              f"{out / 'stage2.cmrk'} sha256={digest}")


def cmd_eval(args):
    from cmr import trainer
    from cmr.synth import DatasetManifest

    ckpt = trainer.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    manifest = DatasetManifest.read(_require_file(args.data, "dataset manifest"))
    report = trainer.evaluate(ckpt, manifest, args.split, parametric=args.parametric)
    text = report.to_text()
    sys.stdout.write(text)
    dest = Path(args.report) if args.report else Path(args.checkpoint).with_suffix(
        f".{args.split}{'.parametric' if args.parametric else ''}.report.txt")
    dest.write_text(text, encoding="utf-8")
    dest.with_suffix(".json").write_text(report.to_json() + "\n", encoding="utf-8")


def cmd_infer(args):
    from cmr import trainer
    from cmr.meshgraph import save_obj

    ckpt = trainer.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    sample = container.load(_require_file(args.sample, "sample"))
    if "image" not in sample:
        raise CliError(f"{args.sample} does not contain an image")
    img = np.asarray(sample["image"], dtype=np.float64)[None]
    enc = ckpt.config.encoder
    if img.shape[1:] != (enc.resolution, enc.resolution, enc.in_channels):
        raise CliError(f"sample image {img.shape[1:]} does not match the checkpoint encoder "
                       f"({enc.resolution}, {enc.resolution}, {enc.in_channels})")
    verts, coarse, cam = trainer.predict_stage1(ckpt, img)
    faces = ckpt.body.template.faces
    save_obj(args.out_obj, verts[0], faces)
    s, tx, ty = cam[0]
    print(f"wrote {args.out_obj}: N={verts.shape[1]} camera s={s:.6g} t=({tx:.6g}, {ty:.6g})")
    if args.parametric:
        _, _, pverts = trainer.predict_parametric(ckpt, coarse)
        out = Path(args.out_param_obj) if args.out_param_obj else \
            Path(args.out_obj).with_name(Path(args.out_obj).stem + "_parametric.obj")
        save_obj(out, pverts[0], faces)
        print(f"wrote {out}: parametric mesh")


def cmd_grad_check(args):
    from cmr.gradcheck import run_suite

    t0 = time.perf_counter()
    results = run_suite(args.scope)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


def cmd_ablate(args):
    from cmr import trainer
    from cmr.regressor import count_params
    from cmr.synth import DatasetManifest

    cfg = load_config(args.config, args.set)
    if args.data:
        cfg = cfg.with_overrides([("train.data", args.data)])
    if not cfg.train.data:
        raise CliError("no dataset given; set train.data in the config or pass --data")
    manifest = DatasetManifest.read(_require_file(cfg.train.data, "dataset manifest"))
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    wins = 0
    for seed in seeds:
        errs = {}
        for kind in ("graph", "fc"):
            c = cfg.with_overrides([("train.model", kind), ("train.seed", str(seed))])
            ck = trainer.train_stage1(c)
            net = trainer.build_network(c, ck.pair)
            head = count_params(ck.params, net.head_param_names(ck.params))
            errs[kind] = trainer.evaluate(ck, manifest, "val").per_vertex_error
            print(f"seed={seed} model={kind} head_params={head} val_per_vertex_error={errs[kind]:.6f}",
                  flush=True)
        wins += errs["graph"] < errs["fc"]
    print(f"graph < fc on {wins}/{len(seeds)} seeds")


# -------------------------------------------------------------------- parser

def build_parser():
    ap = argparse.ArgumentParser(prog="cmr", description="Graph-CNN mesh regression toolkit.")
    ap.add_argument("--version", action="version", version=f"cmr {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("gen-model", help="build the procedural body model and its coarsening")
    p.add_argument("--seed", type=int, default=0, help="seed for the shape directions (default 0)")
    p.add_argument("--out", required=True, help="output model file (.cmrk)")
    p.add_argument("--vertices", type=int, default=600, help="template vertex count (default 600)")
    p.add_argument("--joints", type=int, default=8, help="number of joints, at most 12 (default 8)")
    p.add_argument("--betas", type=int, default=4, help="number of shape coefficients (default 4)")
    p.add_argument("--factor", type=float, default=4.0, help="coarsening factor (default 4)")
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("gen-data", help="render a synthetic dataset and its manifest")
    p.add_argument("--model", required=True, help="model file written by gen-model")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    p.add_argument("--weak-fraction", type=float, default=0.0,
                   help="fraction of training samples with keypoints only (default 0)")
    p.add_argument("--val-fraction", type=float, default=0.2,
                   help="fraction of samples held out for validation (default 0.2)")
    p.add_argument("--resolution", type=int, default=64, help="image side in pixels (default 64)")
    p.add_argument("--mode", choices=("parts", "silhouette"), default="parts",
                   help="part-label planes or a single silhouette channel (default parts)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train stage 1, stage 2 or both")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--data", help="dataset manifest (overrides train.data)")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both", help="what to train (default both)")
    p.add_argument("--stage1", help="stage-1 checkpoint for --stage 2 (default OUT/stage1.cmrk)")
    p.add_argument("--echo-every", type=int, default=0,
                   help="also print every Nth log line to stdout (default 0: never)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report MPJPE, reconstruction and per-vertex error")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--split", choices=("train", "val"), default="val", help="split to evaluate (default val)")
    p.add_argument("--parametric", action="store_true", help="evaluate the stage-2 parametric mesh")
    p.add_argument("--report", help="text report path, with a .json twin beside it "
                                    "(default next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="regress a mesh for one sample and write it as OBJ")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--sample", required=True, help="sample file (.cmrk) holding an image")
    p.add_argument("--out-obj", required=True, help="output OBJ for the regressed mesh")
    p.add_argument("--parametric", action="store_true",
                   help="also write the stage-2 skinned mesh (needs a stage-2 checkpoint)")
    p.add_argument("--out-param-obj", help="OBJ path for the parametric mesh (default *_parametric.obj)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("grad-check", help="compare every gradient against finite differences")
    p.add_argument("--scope", choices=("ops", "model", "all"), default="all",
                   help="individual ops, composite models, or both (default all)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="graph model vs parameter-matched FC baseline")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--data", help="dataset manifest (overrides train.data)")
    p.add_argument("--seeds", help="comma-separated seeds (default: train.seed)")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with ExitStack() as stack:
            n = _threads()
            if n is not None:
                from threadpoolctl import threadpool_limits
                stack.enter_context(threadpool_limits(limits=n))
            rc = args.func(args)
    except KeyboardInterrupt:
        print("cmr: interrupted", file=sys.stderr)
        return 130
    except (CliError, OSError, ValueError, FloatingPointError, KeyError) as e:
        print(f"cmr {args.command}: error: {e}", file=sys.stderr)
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
