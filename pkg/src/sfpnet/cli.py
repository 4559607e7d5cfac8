"""``sfpnet`` command line: train, eval, checks, data generation and benchmarks.

Every subcommand writes JSON lines ``{cmd, step_or_case, metrics,
config_hash}`` to stdout or ``--out``.  Exit status is 0 on success, 1 on a
failed check or runtime error and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import _backend
from .checkpoint import load_checkpoint, save_checkpoint
from .config import loads as config_loads, parse_config
from .errors import SFPError

ORACLE_TOL = 1e-10


class Reporter:
    def __init__(self, cmd: str, config_hash: str, out=None):
        self.cmd, self.config_hash = cmd, config_hash
        self._fh = open(out, "w") if out else sys.stdout
        self._own = bool(out)

    def __call__(self, step_or_case, metrics: dict) -> None:
        line = {"cmd": self.cmd, "step_or_case": step_or_case,
                "metrics": _jsonable(metrics), "config_hash": self.config_hash}
        self._fh.write(json.dumps(line) + "\n")
        self._fh.flush()

    def close(self):
        if self._own:
            self._fh.close()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args, cfg, report) -> int:
    from .train import dataset, train
    report("config", {"config": cfg.dumps()})
    result = train(cfg, dataset(cfg, "train"), report)
    ckpt = Path(args.checkpoint or Path(cfg["output_dir"]) / "checkpoint.sfpk")
    save_checkpoint(ckpt, result.store, cfg.dumps())
    report("done", {"checkpoint": str(ckpt), "steps": len(result.losses),
                    "final_loss": result.losses[-1] if result.losses else None})
    return 0


def cmd_eval(args, cfg, report) -> int:
    from .data import CLASS_NAMES
    from .network import build_network
    from .train import dataset, evaluate
    text, store = load_checkpoint(args.checkpoint)
    cfg = config_loads(text)
    report.config_hash = cfg.hash()
    for key, val in _overrides(args).items():
        if key.startswith("data."):
            cfg.set(key, val)
    net, fresh = build_network(cfg.network_config(), seed=cfg["seed"], dtype=store.dtype)
    if store.names() != fresh.names():
        raise SFPError("checkpoint parameters do not match the configured network")
    per_class, miou = evaluate(net, store, dataset(cfg, args.split),
                               cfg["train.batch_size"]).iou()
    names = CLASS_NAMES if len(CLASS_NAMES) == len(per_class) else range(len(per_class))
    report(args.split, {"iou": {str(n): v for n, v in zip(names, per_class.tolist())},
                        "miou": miou})
    return 0


def cmd_gradcheck(args, cfg, report) -> int:
    from .gradcheck import OP_CASES, check_op, network_case
    ok = True
    names = args.ops.split(",") if args.ops else list(OP_CASES)
    results = [check_op(n, args.seed, args.samples) for n in names]
    if not args.no_network:
        results.append(network_case(args.seed))
    for r in results:
        ok &= r.passed
        report(r.name, {"seed": r.seed, "max_rel_err": r.max_rel_err, "tol": r.tol,
                        "checked": r.checked, "passed": r.passed})
    return 0 if ok else 1


def cmd_oracle(args, cfg, report) -> int:
    from .oracles import submconv_case
    worst = 0.0
    for i in range(args.cases):
        case = submconv_case(args.seed + i)
        worst = max(worst, case.max_abs_diff)
        if args.verbose or case.max_abs_diff >= ORACLE_TOL:
            report(case.seed, {"kernel_size": case.kernel_size, "voxels": case.num_voxels,
                               "max_abs_diff": case.max_abs_diff})
    passed = worst < ORACLE_TOL
    report("summary", {"cases": args.cases, "max_abs_diff": worst, "tol": ORACLE_TOL,
                       "backend": _backend.kernels.name, "passed": passed})
    return 0 if passed else 1


def cmd_gen_data(args, cfg, report) -> int:
    from .data import save_scan
    from .train import synthetic_scans
    out = Path(args.out_dir)
    for split in ("train", "val"):
        (out / split).mkdir(parents=True, exist_ok=True)
        for i, scan in enumerate(synthetic_scans(cfg, split)):
            path, _ = save_scan(scan, out / split / f"{i:05d}.sfpc")
            report(f"{split}/{i}", {"path": str(path), "points": len(scan)})
    return 0


def cmd_export_kernels(args, cfg, report) -> int:
    from .network import build_network, level_kernel_entries
    from .sfpm import export_level_kernels
    text, store = load_checkpoint(args.checkpoint)
    cfg = config_loads(text)
    report.config_hash = cfg.hash()
    net, _ = build_network(cfg.network_config(), seed=cfg["seed"], dtype=store.dtype)
    entries = level_kernel_entries(net, store)
    export_level_kernels(entries, args.kernels_out)
    report("export", {"path": args.kernels_out, "kernels": len(entries)})
    return 0


def cmd_bench(args, cfg, report) -> int:
    from .bench import run_bench
    backends = args.backends.split(",") if args.backends else None
    for row in run_bench(args.scales.split(","), backends, args.repeat):
        report(f"{row['scale']}/{row['backend']}/{row['stage']}", row)
    return 0


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "oracle": cmd_oracle,
    "gen-data": cmd_gen_data, "export-kernels": cmd_export_kernels, "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--out", help="write the JSON-lines report here instead of stdout")

    parser = argparse.ArgumentParser(prog="sfpnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True, metavar="COMMAND")

    p = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint path (default OUTPUT_DIR/checkpoint.sfpk)")

    p = sub.add_parser("eval", parents=[common], help="per-class IoU of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--ops", help="comma-separated subset of op cases")
    p.add_argument("--no-network", action="store_true", help="skip the whole-network case")

    p = sub.add_parser("oracle", parents=[common], help="sparse conv vs dense oracle")
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true", help="one line per case")

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic train/val scans")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("export-kernels", parents=[common], help="dump focal level kernels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kernels-out", required=True, help="JSON output path")

    p = sub.add_parser("bench", parents=[common], help="backend throughput")
    p.add_argument("--scales", default="small,medium,large")
    p.add_argument("--backends", help="comma-separated subset of cython,python")
    p.add_argument("--repeat", type=int, default=3)
    return parser


def _overrides(args) -> dict:
    from .config import parse_overrides
    return parse_overrides(args.set)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    report = None
    try:
        cfg = parse_config(args.config, args.set)
        report = Reporter(args.cmd, cfg.hash(), args.out)
        return COMMANDS[args.cmd](args, cfg, report)
    except (SFPError, OSError) as exc:
        print(f"sfpnet {args.cmd}: {exc}", file=sys.stderr)
        return 1
    finally:
        if report is not None:
            report.close()


if __name__ == "__main__":
    sys.exit(main())
