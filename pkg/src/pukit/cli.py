"""Command-line interface: ``pukit {extract,train,upsample,eval,gradcheck}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import TrainConfig, load_config
from .data import DEFAULT_D_RANGE, build_dataset, load_dataset, save_dataset
from .errors import CheckpointMismatch, ConfigError, PukitError
from .geom.mesh import load_mesh, load_points, save_points
from .loss import LossConfig
from .metric import DEFAULT_DISKS, DEFAULT_P, deviation, nuc
from .nn import load_into, read_checkpoint
from .punet import PUNet
from .train import network_gradient_check, train, upsample, write_losses_csv, write_manifest

log = logging.getLogger("pukit")

MESH_SUFFIXES = (".off", ".ply")
CLOUD_SUFFIXES = (".xyz", ".ply", ".off")


class UsageError(PukitError):
    """Bad arguments or inputs detected before any work starts (exit code 2)."""


def _files(paths, suffixes):
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out += sorted(q for q in p.iterdir() if q.suffix.lower() in suffixes)
        elif p.exists():
            out.append(p)
        else:
            raise UsageError(f"{p}: no such file or directory")
    return out


def _load_cfg(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


# ----------------------------------------------------------------- commands


def cmd_extract(args) -> int:
    paths = _files([args.mesh_dir], MESH_SUFFIXES)
    if not paths:
        raise UsageError(f"{args.mesh_dir}: no meshes found")
    meshes = [load_mesh(p) for p in paths]
    d_range = (args.d_min, args.d_max)
    ds = build_dataset(meshes, args.patches, d_range, args.nhat, args.seed or 0,
                       relative=not args.absolute, names=[p.name for p in paths])
    save_dataset(args.out, ds)
    counts = {p.name: 0 for p in paths}
    for rec in ds.meta["patches"]:
        counts[rec["mesh"]] += 1
    summary = {"dataset": Path(args.out).name, "n_hat": ds.n_hat, "d_range": list(d_range),
               "d_relative": not args.absolute, "patches_per_mesh": counts, "total": len(ds)}
    with open(str(args.out) + ".json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(ds)} patches of {ds.n_hat} points to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    ds = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(ds, cfg, out)
    write_losses_csv(out / "losses.csv", result.history)
    write_manifest(out / "manifest.json", cfg, result, Path(args.dataset).name,
                   include_wall_time=not args.deterministic)
    if args.deterministic:
        with open(out / "timing.json", "w", encoding="utf-8") as fh:
            json.dump({"wall_time_s": result.wall_time}, fh)
    print(f"trained {len(result.history)} epochs; checkpoint {out / 'model.punw'}")
    return 0


def _model_from(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        manifest = Path(args.checkpoint).with_name("manifest.json")
        if not manifest.exists():
            raise UsageError("no --config given and no manifest.json next to the checkpoint")
        with open(manifest, encoding="utf-8") as fh:
            cfg = TrainConfig.from_dict(json.load(fh)["config"])
    model = PUNet(cfg.network.build(), seed=0, dtype=np.dtype(cfg.dtype))
    load_into(model.layers, read_checkpoint(args.checkpoint))
    return model


def cmd_upsample(args) -> int:
    model = _model_from(args)
    if args.rate is not None and args.rate != model.config.upsample_rate:
        raise CheckpointMismatch(
            f"--rate {args.rate} does not match the model's rate {model.config.upsample_rate}"
        )
    pts = load_points(args.input)
    out = upsample(model, pts, args.iterations, seed=args.seed or 0)
    save_points(args.output, out)
    print(f"{len(pts)} -> {len(out)} points written to {args.output}")
    return 0


def _pair(preds, gts):
    by_stem = {p.stem: p for p in gts}
    pairs, errors = [], []
    for p in preds:
        if p.stem in by_stem:
            pairs.append((p, by_stem[p.stem]))
        else:
            errors.append(f"{p}: no mesh named {p.stem}.*")
    matched = {g for _, g in pairs}
    errors += [f"{g}: no cloud named {g.stem}.*" for g in gts if g not in matched]
    return pairs, errors


def cmd_eval(args) -> int:
    pairs, errors = _pair(_files(args.pred, CLOUD_SUFFIXES), _files(args.gt, MESH_SUFFIXES))
    if errors or not pairs:
        raise UsageError("pairing failed:\n  " + "\n  ".join(errors or ["nothing to evaluate"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    objects = [(p.stem, load_points(p), load_mesh(g)) for p, g in pairs]
    nuc_rows, dev_rows = [], []
    for k, (name, cloud, mesh) in enumerate(objects):
        for p in args.p:
            rep = nuc([(cloud, mesh)], p, args.disks, seed=[seed, k])
            nuc_rows.append((name, p, args.disks, rep.avg, rep.nuc))
        dev = deviation(cloud, mesh)
        dev_rows.append((name, dev.mean, dev.std))
    with open(out / "nuc.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("object", "p", "D", "avg", "nuc"))
        w.writerows((n, repr(p), d, repr(a), repr(v)) for n, p, d, a, v in nuc_rows)
    with open(out / "deviation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("object", "dev_mean", "dev_std"))
        w.writerows((n, repr(m), repr(s)) for n, m, s in dev_rows)
    head = "object".ljust(20) + "".join(f"{100 * p:>9.1f}%" for p in args.p) + "   dev_mean    dev_std"
    print(head)
    for name, dmean, dstd in dev_rows:
        vals = [v for n, _, _, _, v in nuc_rows if n == name]
        print(name[:20].ljust(20) + "".join(f"{v:>10.4f}" for v in vals)
              + f" {dmean:>10.3e} {dstd:>10.3e}")
    return 0


def cmd_gradcheck(args) -> int:
    loss = LossConfig(recon=args.recon, alpha=args.alpha, beta=args.beta)
    worst = 0.0
    for s in range(args.seeds):
        res = network_gradient_check((args.seed or 0) + s, loss)
        worst = max(worst, res.max_rel_error)
        print(f"seed {(args.seed or 0) + s}: max rel error {res.max_rel_error:.3e} "
              f"({res.n_checked} checked, {res.n_excluded} excluded at kinks)")
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} vs tolerance {args.tol:g}")
    return 0 if ok else 1


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--config", help="INI file with [network], [loss], [train] sections")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded math and no wall-clock data in outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pukit", description="Point cloud upsampling toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common], help="crop training patches from meshes")
    p.add_argument("mesh_dir")
    p.add_argument("out", help="output .pupd file")
    p.add_argument("--patches", type=int, default=100, help="patches per mesh")
    p.add_argument("--nhat", type=int, default=4096, help="points per patch")
    p.add_argument("--d-min", type=float, default=DEFAULT_D_RANGE[0])
    p.add_argument("--d-max", type=float, default=DEFAULT_D_RANGE[1])
    p.add_argument("--absolute", action="store_true",
                   help="radii are absolute lengths rather than fractions of the bbox diagonal")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common], help="train on a .pupd dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("upsample", parents=[common], help="upsample a point cloud")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output", help=".xyz or .ply")
    p.add_argument("--rate", type=int, default=None, help="expected rate (checked)")
    p.add_argument("--iterations", type=int, default=1)
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser("eval", parents=[common], help="NUC and deviation reports")
    p.add_argument("--pred", nargs="+", required=True, help="clouds or directories")
    p.add_argument("--gt", nargs="+", required=True, help="meshes or directories")
    p.add_argument("--p", type=float, nargs="+", default=list(DEFAULT_P))
    p.add_argument("--disks", type=int, default=DEFAULT_DISKS)
    p.add_argument("--out", default=".", help="directory for nuc.csv and deviation.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the network")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--recon", default="emd_exact")
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--beta", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_cap(deterministic):
    if deterministic:
        return 1
    env = os.environ.get("PUKIT_THREADS")
    if env is None:
        return None
    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"PUKIT_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("PUKIT_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_thread_cap(args.deterministic)):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"pukit {args.command}: {exc}", file=sys.stderr)
        return 2
    except (PukitError, OSError) as exc:
        print(f"pukit {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
