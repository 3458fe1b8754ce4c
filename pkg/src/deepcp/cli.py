"""Command-line pipeline: phantom, mask, undersample, recon, train, eval.

Every output file ``X`` gets a sibling ``X.manifest.json`` recording the
command, resolved configuration, seeds, paths and library version.  Wall
clock data sits under the ``"timing"`` key only, so manifests of repeated
runs compare equal once that key is dropped.  ``deepcp replay MANIFEST``
re-runs the recorded command.

Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric or divergence,
5 infeasible configuration.
"""

import argparse
import dataclasses
import datetime
import json
import logging
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .classical_cp import CPParams, cp_solve
from .cpnet import forward_only, load_weights, save_weights
from .errors import (
    ConfigurationError,
    DegenerateInputError,
    FormatError,
    InvalidArgumentError,
    TrainingDivergedError,
)
from .fileio import load_field, load_mask, save_field, save_mask
from .kspace import apply_encoding, generate_poisson_mask, zero_filled_recon
from .metrics import build_report, error_map, to_gray8, write_pgm
from .phantom import random_phantom_spec, render_phantom, shepp_logan_spec
from .training import TrainConfig, normalize, train

log = logging.getLogger("deepcp")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 2, 3, 4, 5


# --- manifests ------------------------------------------------------------------

def write_manifest(output, command, argv, config, inputs, outputs, seeds, started):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "timing": {
            "started_utc": started.isoformat(),
            "wall_clock_seconds": (datetime.datetime.now(datetime.timezone.utc) - started).total_seconds(),
        },
    }
    path = f"{output}.manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _write_all(ctx, outputs, config, inputs=(), seeds=None):
    for out in outputs:
        write_manifest(out, ctx["command"], ctx["argv"], config, inputs, outputs, seeds or {},
                       ctx["started"])


# --- commands ---------------------------------------------------------------------

def cmd_phantom(args, ctx):
    if args.count == 0:
        print("phantom: N = 0, no images written")
        return EXIT_OK
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []
    for i in range(args.count):
        if args.kind == "shepp-logan":
            spec = shepp_logan_spec(args.size, args.size)
        else:
            spec = random_phantom_spec(np.random.default_rng([args.seed, i]), args.size, args.size)
        path = os.path.join(args.out_dir, f"phantom_{i:03d}.cf")
        save_field(path, normalize(render_phantom(spec)))
        outputs.append(path)
    cfg = {"count": args.count, "size": args.size, "kind": args.kind}
    _write_all(ctx, outputs, cfg, seeds={"seed": args.seed})
    print(f"phantom: wrote {len(outputs)} image(s) to {args.out_dir}")
    return EXIT_OK


def cmd_mask(args, ctx):
    m = generate_poisson_mask(args.size, args.size, args.R, args.calib_radius, args.seed)
    save_mask(args.out, m)
    cfg = {"size": args.size, "R": args.R, "calib_radius": args.calib_radius,
           "achieved_R": m.achieved_R, "min_distance": m.min_distance}
    _write_all(ctx, [args.out], cfg, seeds={"seed": args.seed})
    print(f"mask: R = {m.achieved_R:.3f} (target {args.R}) -> {args.out}")
    return EXIT_OK


def cmd_undersample(args, ctx):
    x = load_field(args.image)
    m = load_mask(args.mask)
    if x.shape != m.shape:
        raise InvalidArgumentError(f"image {x.shape} and mask {m.shape} differ in shape")
    save_field(args.out, apply_encoding(x, m))
    _write_all(ctx, [args.out], {}, inputs=[args.image, args.mask])
    return EXIT_OK


def cmd_recon(args, ctx):
    params = CPParams(sigma=args.sigma, tau=args.tau, theta=args.theta, lam=args.lam,
                      max_iters=args.max_iters, tol=args.tol)
    y = load_field(args.kspace)
    m = load_mask(args.mask)
    inputs = [args.kspace, args.mask]
    cfg = {"method": args.method}
    if args.method == "zf":
        x = zero_filled_recon(y, m)
    elif args.method == "cp":
        x, trace = cp_solve(y, m, params)
        cfg["cp"] = dataclasses.asdict(params)
        cfg["iterations_run"] = trace.iterations_run
        cfg["converged"] = trace.converged
        if args.trace:
            trace.to_csv(args.trace)
    else:
        if not args.weights:
            raise InvalidArgumentError("--method net requires --weights")
        w = load_weights(args.weights)
        x = forward_only(y, m, w)
        inputs.append(args.weights)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("reconstruction contains non-finite values")
    save_field(args.out, x)
    _write_all(ctx, [args.out], cfg, inputs=inputs)
    return EXIT_OK


TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig) if f.name != "checkpoint_dir"]


def resolve_train_config(args):
    """Built-in defaults < config file < command-line flags."""
    d = TrainConfig().to_dict()
    if args.config:
        d.update(TrainConfig.from_file(args.config).to_dict())
    for key in TRAIN_KEYS:
        val = getattr(args, key)
        if val is not None:
            d[key] = val
    d["checkpoint_dir"] = args.out_dir
    return TrainConfig.from_dict(d)


def cmd_train(args, ctx):
    cfg = resolve_train_config(args)
    w, hist = train(cfg, resume_from=args.resume)
    final = os.path.join(args.out_dir, "final.cpw")
    save_weights(final, w)
    outputs = [final, os.path.join(args.out_dir, "best.cpw")]
    inputs = [p for p in (args.config, args.resume) if p]
    # manifests exclude the absolute output dir so reruns elsewhere compare equal
    conf = cfg.to_dict()
    conf.pop("checkpoint_dir")
    _write_all(ctx, outputs, {"train_config": conf, "initial_val_loss": hist.initial_val_loss,
                              "val_loss": hist.val_loss, "train_loss": hist.train_loss},
               inputs=inputs, seeds={"seed": cfg.seed})
    print(f"train: val loss {hist.initial_val_loss:.4e} -> {hist.val_loss[-1]:.4e}; "
          f"weights in {args.out_dir}")
    return EXIT_OK


def _parse_recon_spec(spec):
    name, sep, path = spec.partition("=")
    if not sep or not name or not path:
        raise InvalidArgumentError(f"--recon expects METHOD=PATH, got {spec!r}")
    return name, path


def cmd_eval(args, ctx):
    ref = load_field(args.ref)
    recons, inputs = {}, [args.ref]
    for spec in args.recon:
        name, path = _parse_recon_spec(spec)
        recons[(name, float(args.R))] = load_field(path)
        inputs.append(path)
    report = build_report(recons, ref, args.ref_id or os.path.basename(args.ref))
    report.to_csv(args.out)
    outputs = [args.out]
    if args.error_maps:
        os.makedirs(args.error_maps, exist_ok=True)
        path = os.path.join(args.error_maps, "reference.pgm")
        write_pgm(path, to_gray8(ref))
        outputs.append(path)
        for (name, _), x in recons.items():
            if x.shape != ref.shape:
                continue
            for kind, img in (("recon", to_gray8(x, vmax=np.abs(ref).max())),
                              ("error", error_map(x, ref, args.amplify))):
                path = os.path.join(args.error_maps, f"{name}_{kind}.pgm")
                write_pgm(path, img)
                outputs.append(path)
    _write_all(ctx, [args.out], {"R": args.R, "amplify": args.amplify}, inputs=inputs)
    print(report.to_csv_text(), end="")
    return EXIT_OK


def cmd_replay(args, ctx):
    with open(args.manifest) as f:
        argv = json.load(f)["argv"]
    if argv and argv[0] == "replay":
        raise InvalidArgumentError("manifest records a replay command")
    return main(argv)


# --- parser ---------------------------------------------------------------------

def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="deepcp", formatter_class=fmt,
                                description="CS-MRI reconstruction with Chambolle-Pock and CP-net.")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="upper bound on BLAS/OpenMP threads")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=f"deepcp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", formatter_class=fmt, help="render phantom images")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.add_argument("--count", type=int, default=1, help="number of images")
    s.add_argument("--size", type=int, default=64, help="image side length")
    s.add_argument("--kind", choices=["shepp-logan", "random"], default="shepp-logan",
                   help="fixed Shepp-Logan or jittered random ellipses")
    s.add_argument("--seed", type=int, default=0, help="seed for random phantoms")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("mask", formatter_class=fmt, help="variable-density Poisson-disk mask")
    s.add_argument("--out", required=True, help="output mask file")
    s.add_argument("--size", type=int, default=64, help="mask side length")
    s.add_argument("--R", type=float, default=4.0, help="target acceleration factor")
    s.add_argument("--calib-radius", type=float, default=4.0,
                   help="radius of the fully sampled centre, in samples")
    s.add_argument("--seed", type=int, default=0, help="sampling seed")
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("undersample", formatter_class=fmt, help="masked k-space of an image")
    s.add_argument("--image", required=True, help="input image field")
    s.add_argument("--mask", required=True, help="input mask")
    s.add_argument("--out", required=True, help="output k-space field")
    s.set_defaults(func=cmd_undersample)

    s = sub.add_parser("recon", formatter_class=fmt, help="reconstruct an image")
    s.add_argument("--kspace", required=True, help="input k-space field")
    s.add_argument("--mask", required=True, help="input mask")
    s.add_argument("--out", required=True, help="output image field")
    s.add_argument("--method", choices=["zf", "cp", "net"], default="zf", help="reconstruction method")
    s.add_argument("--weights", default=None, help="CP-net weights (method net)")
    d = CPParams()
    s.add_argument("--sigma", type=float, default=d.sigma, help="CP dual step")
    s.add_argument("--tau", type=float, default=d.tau, help="CP primal step")
    s.add_argument("--theta", type=float, default=d.theta, help="CP extrapolation weight")
    s.add_argument("--lam", type=float, default=d.lam, help="Haar l1 weight")
    s.add_argument("--max-iters", type=int, default=d.max_iters, help="CP iteration cap")
    s.add_argument("--tol", type=float, default=d.tol, help="CP relative-change tolerance")
    s.add_argument("--trace", default=None, help="write the CP iteration trace CSV here")
    s.set_defaults(func=cmd_recon)

    s = sub.add_parser("train", formatter_class=fmt,
                       help="train CP-net on synthetic phantoms",
                       description="Flags left unset fall back to --config, then to built-in defaults.")
    s.add_argument("--out-dir", required=True, help="checkpoint directory")
    s.add_argument("--config", default=None, help="JSON TrainConfig file")
    s.add_argument("--resume", default=None, help="continue from an epoch_XXX.cpw checkpoint")
    builtin = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        if f.name == "checkpoint_dir":
            continue
        dflt = getattr(builtin, f.name)
        flag = "--" + f.name.replace("_", "-")
        if isinstance(dflt, bool):
            s.add_argument(flag, type=_parse_bool, default=None,
                           help=f"true/false; built-in {dflt}")
        elif isinstance(dflt, tuple):
            s.add_argument(flag, type=float, nargs="+", default=None,
                           help=f"one or more values; built-in {' '.join(map(str, dflt))}")
        else:
            s.add_argument(flag, type=type(dflt), default=None, help=f"built-in {dflt}")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", formatter_class=fmt, help="metrics report against a reference")
    s.add_argument("--ref", required=True, help="reference image field")
    s.add_argument("--recon", action="append", required=True, metavar="METHOD=PATH",
                   help="reconstruction to score; repeatable")
    s.add_argument("--R", type=float, default=4.0, help="acceleration factor recorded in the report")
    s.add_argument("--out", required=True, help="output CSV report")
    s.add_argument("--ref-id", default=None, help="reference identifier (file name if unset)")
    s.add_argument("--error-maps", default=None, help="directory for PGM images and error maps")
    s.add_argument("--amplify", type=float, default=5.0, help="error-map amplification")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("replay", formatter_class=fmt, help="re-run the command in a manifest")
    s.add_argument("manifest", help="a .manifest.json written by any command")
    s.set_defaults(func=cmd_replay)
    return p


def _parse_bool(text):
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _exit_code(exc):
    if isinstance(exc, ConfigurationError):
        return EXIT_INFEASIBLE
    if isinstance(exc, (TrainingDivergedError, DegenerateInputError, ArithmeticError)):
        return EXIT_NUMERIC
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, (InvalidArgumentError, ValueError)):
        return EXIT_USAGE
    raise exc


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    if args.threads < 1:
        print("deepcp: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    ctx = {"command": args.command, "argv": argv,
           "started": datetime.datetime.now(datetime.timezone.utc)}
    t0 = time.perf_counter()
    try:
        with threadpool_limits(limits=args.threads):
            code = args.func(args, ctx)
    except Exception as exc:  # one-line diagnostic naming the stage
        code = _exit_code(exc)
        print(f"deepcp {args.command}: error: {exc}", file=sys.stderr)
        return code
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
