"""Command-line entry point: ``softprune {train,extract,flops,bench,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import SoftPruneError

log = logging.getLogger("softprune")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json_arg(value: str) -> dict:
    """Accept either inline JSON or a path to a JSON file."""
    if value.lstrip().startswith("{"):
        return json.loads(value)
    if not os.path.exists(value):
        raise UsageError(f"no such file: {value}")
    with open(value) as fh:
        return json.load(fh)


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .train import TrainConfig, train, write_metrics_csv

    if not os.path.exists(args.config):
        raise UsageError(f"config file not found: {args.config}")
    config = TrainConfig.from_json(args.config)
    os.makedirs(args.out, exist_ok=True)
    result = train(config, on_epoch=lambda r: print(",".join(r.cells()), flush=True) if args.verbose else None)

    csv_path = os.path.join(args.out, "metrics.csv")
    write_metrics_csv(result.metrics, csv_path)
    result.mask.save(os.path.join(args.out, "mask.json"))
    save_checkpoint(result.model, os.path.join(args.out, "masked"), result.mask)
    save_checkpoint(result.compact.model, os.path.join(args.out, "compact"))
    print(f"metrics      : {csv_path}")
    print(f"test acc     : {result.test_accuracy:.4f} (masked)  {result.compact_accuracy:.4f} (compact)")
    print(f"params       : {result.model.num_params()} -> {result.compact.model.num_params()}")
    if not args.no_plots:
        from .plotting import plot_metrics, plot_schedule
        from .pruning import solve_schedule

        print(f"figure       : {plot_metrics(result.metrics, os.path.join(args.out, 'metrics.png'))}")
        pc = config.prune
        if pc is not None and pc.mode != "hard":
            p_min = pc.P_goal if pc.mode == "soft" else pc.P_min
            sched = solve_schedule(pc.P_goal, p_min, pc.D, pc.epoch_max)
            print(f"figure       : {plot_schedule(sched, os.path.join(args.out, 'schedule.png'))}")
    return 0


def cmd_extract(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .pruning import MaskState, extract_compact

    model, stored = load_checkpoint(args.checkpoint)
    mask = MaskState.load(args.mask) if args.mask else stored
    if mask is None:
        raise UsageError("no mask given and none stored with the checkpoint")
    compact = extract_compact(model, mask)
    save_checkpoint(compact.model, args.out)
    print(f"extracted {mask.total_pruned()} filters: {model.num_params()} -> {compact.model.num_params()} parameters")
    print(f"compact checkpoint: {args.out}")
    return 0


def _uniform_mask(model, rate: float):
    from .pruning import MaskState, num_to_prune

    mask = MaskState(epoch=0)
    for lid in model.prune_sites():
        n = model.width_of(lid)
        # the lowest indices are as good as any: weights here are random
        mask.layers[lid] = list(range(num_to_prune(n, rate)))
    return mask


def cmd_flops(args) -> int:
    from .analysis import count_flops
    from .models import build_from_arch
    from .pruning import MaskState, extract_compact, zeroize_filters

    arch = _read_json_arg(args.arch)
    shape = arch.get("input_shape") or [3, args.input_size, args.input_size]
    model = build_from_arch(arch, shape)
    mask = None
    if args.mask:
        mask = MaskState.load(args.mask)
    elif args.rate is not None:
        mask = _uniform_mask(model, args.rate)
    if mask is not None:
        masked = model.copy()
        for lid, idx in mask.layers.items():
            zeroize_filters(masked, lid, idx)
        report = count_flops(extract_compact(masked, mask).model, model)
    else:
        report = count_flops(model)
    print(report.to_json() if args.json else report.to_text())
    if args.plot:
        from .plotting import plot_flops

        plot_flops(report, args.plot)
        print(f"figure: {args.plot}", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    from .analysis import speedup_report
    from .checkpoint import load_checkpoint
    from .models import build_from_arch

    pruned, _ = load_checkpoint(args.checkpoint)
    if args.baseline:
        baseline, _ = load_checkpoint(args.baseline)
    else:
        baseline = build_from_arch(pruned.arch, pruned.input_shape)
    threads = None if args.threads == 0 else args.threads
    rep = speedup_report(baseline, pruned, args.batch, args.reps, args.warmup, threads)
    print(json.dumps(rep.to_dict(), indent=2) if args.json else rep.to_text())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite, tolerance

    ok = True
    for name, err in run_suite(args.seed).items():
        tol = tolerance(name)
        status = "ok" if err < tol else "FAIL"
        ok &= err < tol
        print(f"{name:24s} max rel err {err:.3e}  (tol {tol:.0e})  {status}")
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="softprune", description="Soft / asymptotic filter pruning for small CNNs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train (and prune) from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="run")
    t.add_argument("--no-plots", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="delete zeroized filters from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mask")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    f = sub.add_parser("flops", help="count MACs, optionally after pruning")
    f.add_argument("--arch", required=True, help="inline JSON or path to an architecture JSON")
    f.add_argument("--mask")
    f.add_argument("--rate", type=float, help="uniform pruning rate instead of a mask file")
    f.add_argument("--input-size", type=int, default=32)
    f.add_argument("--json", action="store_true")
    f.add_argument("--plot", help="write a per-layer figure to this path")
    f.set_defaults(func=cmd_flops)

    b = sub.add_parser("bench", help="time forward passes of a checkpoint against its unpruned baseline")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--baseline")
    b.add_argument("--batch", type=int, default=16)
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--threads", type=int, default=1, help="0 = library default threading")
    b.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (SoftPruneError, OSError, json.JSONDecodeError) as exc:
        print(f"softprune: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
