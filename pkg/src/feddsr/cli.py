"""Command-line entry point: run, ablate, gradcheck, bound, report."""
import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import parse_config
from .diagnostics import BoundInputs, theorem1_bound
from .errors import ConfigError, FedDSRError, NonFiniteError
from .experiment import (AXES, ablate, format_ablation, format_report, report, run_experiment, seed_list,
                         write_ablation_table)
from .gradcheck import gradient_check
from .model import TapSpec, build_adapters, build_network, resolve_taps
from .objectives import LossWeights, objective
from .tensor import RngStream, Tensor, precision

EXIT_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_FAILED = 4


# command-line shortcuts for the data section
DATA_FLAGS = (("height", "height"), ("width", "width"), ("classes", "classes"), ("samples", "train_samples"),
              ("gamma", "gamma"), ("vehicles", "vehicles"))


def _load(args):
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: not valid JSON ({exc})") from None
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.precision is not None:
        raw["precision"] = args.precision
    if args.out is not None:
        raw["output"] = args.out
    for flag, key in DATA_FLAGS:
        v = getattr(args, flag, None)
        if v is not None:
            if not isinstance(raw.setdefault("data", {}), dict):
                raise ConfigError("data: expected an object")
            raw["data"][key] = v
    return parse_config(raw)


def cmd_run(args):
    cfg = _load(args)
    res = run_experiment(cfg, threads=args.threads)
    last = res.records[-1]
    met = last["metrics"]
    print(f"round {last['t']}: mIoU {met['mIoU']:.2f}  mF1 {met['mF1']:.2f}  "
          f"mPre {met['mPre']:.2f}  mRec {met['mRec']:.2f}")
    print(f"logs and checkpoints in {res.out_dir}")
    return 0


def cmd_ablate(args):
    base = _load(args)
    out = base.tree["output"]
    rows = ablate(args.axis, base, seed_list(args.seeds), out, threads=args.threads)
    os.makedirs(out, exist_ok=True)
    write_ablation_table(rows, os.path.join(out, f"ablation_{args.axis}.csv"))
    print(format_ablation(args.axis, rows), end="")
    return 0


def gradcheck_setup(height=4, width=4, classes=3, taps=2, net_width=2, batch=2, seed=0):
    """Tiny network, adapters and batch for checking the full objective."""
    net = build_network(3, net_width, classes, seed)
    sites = resolve_taps(TapSpec("after-downsample", taps))
    adapters = build_adapters(net, sites, seed)
    rng = RngStream(seed, 99)
    x = Tensor(rng.uniform(size=(batch, 3, height, width)))
    labels = rng.integers(0, classes, size=(batch, height, width)).astype(np.uint8)
    weights = LossWeights.uniform(len(sites))
    params = net.parameters() + [p for a in adapters for p in a.parameters()]
    return (lambda: objective(net, adapters, sites, x, labels, weights).tensor), params


def cmd_gradcheck(args):
    prec = args.precision or "single"
    if args.config:
        cfg = _load(args)
        d, m = cfg.tree["data"], cfg.tree["model"]
        dims = dict(height=d["height"], width=d["width"], classes=d["classes"], taps=len(cfg.arch.taps),
                    net_width=m["width"], seed=cfg.seed)
        prec = cfg.tree["precision"] if args.precision is None else prec
    else:
        dims = {"seed": args.seed or 0}
    with precision(prec):
        f, params = gradcheck_setup(**dims)
        res = gradient_check(f, params, max_coords=args.max_coords)
    print(f"precision {prec}: max relative error {res.max_rel_error:.3e} over {res.checked} coordinates "
          f"({res.skipped} skipped at kinks)")
    limit = 1e-3 if prec == "single" else 1e-5
    return 0 if res.max_rel_error < limit else EXIT_FAILED


BOUND_KEYS = ("delta", "eta", "T", "E", "L_max", "G_T2", "sigma_T2", "H", "grad_norm_sq", "c")


def cmd_bound(args):
    with open(args.params, encoding="utf-8") as fh:
        raw = json.load(fh)
    unknown = sorted(set(raw) - set(BOUND_KEYS))
    if unknown:
        raise ConfigError(f"{args.params}: unknown bound inputs {unknown}")
    missing = [k for k in ("delta", "eta", "T", "E", "L_max") if k not in raw]
    if missing:
        raise ConfigError(f"{args.params}: missing bound inputs {missing}")
    rep = theorem1_bound(BoundInputs(**raw))
    print("bound estimate (constants are user-supplied or probe estimates)")
    for k, v in rep.as_dict().items():
        if k != "estimate":
            print(f"  {k:>13}: {v:.6g}")
    return 0


def cmd_report(args):
    rows = report(args.logs, target=args.target, target_round=args.target_round)
    print(format_report(rows), end="")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--threads", type=int, default=1, help="vehicles trained in parallel")
    common.add_argument("--precision", choices=("single", "double"))
    common.add_argument("-v", "--verbose", action="store_true")
    data = common.add_argument_group("data (override the config file)")
    data.add_argument("--height", type=int, help="image height")
    data.add_argument("--width", type=int, help="image width")
    data.add_argument("--classes", type=int, help="number of classes K")
    data.add_argument("--samples", type=int, help="training samples")
    data.add_argument("--gamma", type=float, help="Dirichlet concentration")
    data.add_argument("--vehicles", type=int, help="fleet size N")

    p = argparse.ArgumentParser(prog="feddsr", description="Federated deep-supervision segmentation simulator")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one experiment")
    a = sub.add_parser("ablate", parents=[common], help="sweep tap count, distance or position")
    a.add_argument("axis", choices=sorted(AXES))
    a.add_argument("--seeds", default="0-4", help='e.g. "0-4" or "0,2,7"')
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full objective")
    g.add_argument("--max-coords", type=int, default=None, help="check a random subset of coordinates")
    b = sub.add_parser("bound", parents=[common], help="evaluate the convergence bound from a JSON file")
    b.add_argument("params")
    r = sub.add_parser("report", parents=[common], help="rounds-to-target comparison of run logs")
    r.add_argument("logs", nargs="+", help="run directories; the first is the baseline")
    grp = r.add_mutually_exclusive_group(required=True)
    grp.add_argument("--target", type=float, help="mIoU threshold")
    grp.add_argument("--target-round", type=int, help="use the baseline's mIoU at this round")
    return p


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "bound": cmd_bound,
            "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (FileNotFoundError, FedDSRError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
