"""``unicsi`` command line: gen, train, eval, bench, compare.

Outputs default to ``$UNICSI_OUT`` (or the working directory). Any flag can
also come from ``--config file.json``; explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import channelgen as cg
from . import evalbench as eb
from . import models as md
from . import pipeline as pl
from . import training as tr
from .errors import ConfigurationError, RangeError, TrainingError, UsageError

log = logging.getLogger("unicsi")

OUT_ENV = "UNICSI_OUT"


class CliError(Exception):
    pass


def _out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "."))


def _resolve(path: str | None, default_name: str) -> Path:
    p = Path(path) if path else _out_dir() / default_name
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _ints(text: str) -> list[int]:
    return [int(t) for t in str(text).split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in str(text).split(",") if t.strip()]


def _digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_manifest(command: str, args: argparse.Namespace, inputs=(), outputs=()) -> dict:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    return {
        "command": command,
        "tool_version": __version__,
        "config": config,
        "seeds": {k: v for k, v in config.items() if "seed" in k},
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": {str(p): _digest(p) for p in outputs if Path(p).exists()},
    }


def _write_manifest(path: Path, manifest: dict) -> Path:
    mp = Path(str(path) + ".manifest.json")
    mp.write_text(json.dumps(manifest, indent=2, default=str))
    return mp


def _lambda_set(lambdas: str, weights: str | None) -> md.LambdaSet:
    lams = _ints(lambdas)
    if weights:
        ws = _floats(weights)
        if len(ws) != len(lams):
            raise CliError("--weights needs one value per latent size")
        total = math.fsum(ws)
        pairs = sorted(zip(lams, ws))
        return md.LambdaSet(tuple(l for l, _ in pairs), tuple(w / total for _, w in pairs))
    return md.LambdaSet.uniform(lams)


def _load_delay(path: str) -> tuple[pl.DelaySet, dict]:
    tensors, manifest = cg.read_dataset(path)
    return pl.tensors_to_delay(tensors), manifest


# --- commands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    profiles_src = cg.load_profiles(args.profiles_file) if args.profiles_file else None
    names = [n for n in args.profile.split(",") if n]
    profiles = [cg.get_profile(n, profiles_src) for n in names]
    pl.categorize(args.k)
    grid = cg.GridSpec(profiles, _floats(args.snr), args.k, args.nbs, args.nue,
                       args.samples, args.seed, args.spacing)
    tensors = cg.generate_grid(grid.settings)
    out = _resolve(args.out, "dataset.csit")
    cg.write_dataset(out, tensors, grid.settings)
    check = cg.read_container(out)
    if check.shape[0] != len(tensors):
        raise CliError(f"container validation failed for {out}")
    manifest = json.loads(cg.manifest_path(out).read_text())
    manifest["run"] = run_manifest("gen", args, outputs=[out])
    cg.manifest_path(out).write_text(json.dumps(manifest, indent=2, default=str))
    print(f"wrote {len(tensors)} tensors of shape {list(check.shape[1:])} to {out}")
    return 0


def cmd_train(args) -> int:
    ls = _lambda_set(args.lambdas, args.weights)
    if args.fine_tune and args.approach != "masked":
        raise CliError("--fine-tune is only defined for --approach masked")
    ds, _ = _load_delay(args.data)
    train_set, _ = eb.split_delay_set(ds, args.split_seed, args.test_fraction)
    bundle = md.build(args.approach, ds.category, ls, seed=args.seed)
    cfg = tr.TrainConfig(args.epochs, args.substep_epochs, args.batch_size, args.lr,
                         args.seed, ls, args.fine_tune)
    bundle, history = tr.train(bundle, train_set, cfg)
    out = _resolve(args.out, f"{args.approach}.csae")
    hist_path = Path(str(out) + ".history.csv")
    history.write_csv(hist_path)
    md.save_bundle(out, bundle, {
        "seeds": {"init": args.seed, "split": args.split_seed},
        "train_config": {k: v for k, v in asdict(cfg).items() if k != "lambda_set"},
        "history_csv": hist_path.name,
        "run": run_manifest("train", args, inputs=[Path(args.data)]),
    })
    md.load_bundle(out)
    print(f"{args.approach}: encoder params {bundle.encoder_params()}, "
          f"decoder params {bundle.decoder_params()}, final loss {history.totals()[-1]:.6g}")
    print(f"wrote {out} and {hist_path}")
    return 0


def cmd_eval(args) -> int:
    bundle, _ = md.load_bundle(args.checkpoint)
    ds, _ = _load_delay(args.data)
    if args.split == "test":
        _, ds = eb.split_delay_set(ds, args.split_seed, args.test_fraction)
    if ds.category != bundle.category:
        raise CliError(f"checkpoint is for category {bundle.category.index}, "
                       f"data is category {ds.category.index}")
    results, recons = eb.evaluate(bundle, ds, keep_reconstructions=True)
    out = _resolve(args.out, "nmse.csv")
    eb.write_nmse_csv(out, results)
    outputs = [out]
    if args.dump:
        dump = _resolve(args.dump, "recon.npz")
        np.savez(dump, h=ds.raw(), origin=ds.origin,
                 **{f"h_hat_{lam}": r for lam, r in recons.items()})
        outputs.append(dump)
    if args.emit_plot_data:
        outputs += eb.write_plot_data(out.parent, nmse_results=results)
    _write_manifest(out, run_manifest("eval", args, [Path(args.checkpoint), Path(args.data)], outputs))
    for r in results:
        print(f"{r.approach} lambda={r.lam:3d} cr={r.cr} nmse={r.nmse_db:.3f} dB (n={r.sample_count})")
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint:
        bundle, _ = md.load_bundle(args.checkpoint)
        bundles = [bundle]
        inputs = [Path(args.checkpoint)]
    else:
        ls = _lambda_set(args.lambdas, None)
        cat = pl.category(args.category)
        bundles = [md.build(a, cat, ls, seed=args.seed) for a in args.approach.split(",")]
        inputs = []
    rows = []
    for b in bundles:
        res = eb.bench_latency(b, repeats=args.repeats, parts=args.parts, seed=args.seed)
        rows.append(eb.ScalingRow(b.approach, res.cardinality, res.param_count,
                                  res.worst_cr_latency, res.worst_cr_flops))
        print(f"{b.approach} |L|={res.cardinality} params={res.param_count} "
              f"worst-CR latency={res.worst_cr_latency * 1e3:.4f} ms flops={res.worst_cr_flops}")
    out = _resolve(args.out, "bench.csv")
    eb.write_scaling_csv(out, rows)
    outputs = [out]
    if args.emit_plot_data:
        outputs += eb.write_plot_data(out.parent, scaling_rows=rows)
    _write_manifest(out, run_manifest("bench", args, inputs, outputs))
    return 0


def cmd_compare(args) -> int:
    cases = _ints(args.cases)
    outdir = _resolve(None, "x").parent if not args.outdir else Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cat = pl.category(args.category)
    approaches = ["naive", "saldr", "masked"]
    lambda_sets = [md.lambda_set_for_cardinality(c, args.lambda_max) for c in cases]
    rows = eb.scaling_experiment(approaches, lambda_sets, cat, args.repeats, args.parts, args.seed)
    table = outdir / "complexity.csv"
    eb.write_scaling_csv(table, rows)
    for r in rows:
        lat = "-" if r.latency_s is None else f"{r.latency_s * 1e3:.4f} ms"
        print(f"|L|={r.cardinality:2d} {r.approach:6s} params={r.params:7d} latency={lat} flops={r.flops}")
    outputs = [table]
    inputs = []
    nmse_results, ft_history = None, None
    if args.data:
        inputs.append(Path(args.data))
        ds, _ = _load_delay(args.data)
        if ds.category != cat:
            raise CliError(f"data category {ds.category.index} != --category {cat.index}")
        train_set, test_set = eb.split_delay_set(ds, args.split_seed, args.test_fraction)
        ls = md.lambda_set_for_cardinality(args.train_case, args.lambda_max)
        nmse_results = []
        for a in approaches:
            cfg = tr.TrainConfig(args.epochs, args.substep_epochs, args.batch_size, args.lr,
                                 args.seed, ls, args.fine_tune and a == "masked")
            bundle = md.build(a, cat, ls, seed=args.seed)
            bundle, history = tr.train(bundle, train_set, cfg)
            if a == "masked":
                ft_history = history
            nmse_results += eb.evaluate(bundle, test_set)
        nmse_path = outdir / "nmse.csv"
        eb.write_nmse_csv(nmse_path, nmse_results)
        outputs.append(nmse_path)
        for r in nmse_results:
            print(f"{r.approach:6s} lambda={r.lam:3d} nmse={r.nmse_db:.3f} dB")
    if args.emit_plot_data:
        outputs += eb.write_plot_data(outdir, nmse_results, rows, ft_history)
    _write_manifest(table, run_manifest("compare", args, inputs, outputs))
    return 0


# --- parser -----------------------------------------------------------------

def _train_flags(p):
    p.add_argument("--epochs", type=int, default=100, help="joint-training epochs")
    p.add_argument("--substep-epochs", type=int, default=50, help="epochs per fine-tune sub-step")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fine-tune", action="store_true")


def _split_flags(p):
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unicsi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with default flag values")
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate a CSI dataset container")
    p.add_argument("--profile", default="EPA", help="comma-separated profile names")
    p.add_argument("--profiles-file", help="JSON profile table overriding the built-ins")
    p.add_argument("--k", type=int, default=128)
    p.add_argument("--nbs", type=int, default=32)
    p.add_argument("--nue", type=int, default=4)
    p.add_argument("--snr", default="20", help="comma-separated SNRs in dB ('inf' disables noise)")
    p.add_argument("--samples", type=int, default=12, help="tensors per setting")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spacing", type=float, default=cg.DEFAULT_SUBCARRIER_SPACING_HZ,
                   help="bin spacing in Hz")
    p.add_argument("--out")

    p = add("train", cmd_train, "train one approach and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--approach", choices=md.APPROACHES, default="masked")
    p.add_argument("--lambdas", default="4,8,16,32")
    p.add_argument("--weights", help="comma-separated loss weights (normalized to sum 1)")
    _train_flags(p)
    _split_flags(p)
    p.add_argument("--out")

    p = add("eval", cmd_eval, "per-CR NMSE of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")
    _split_flags(p)
    p.add_argument("--dump", help="write raw reconstructions (.npz)")
    p.add_argument("--emit-plot-data", action="store_true")
    p.add_argument("--out")

    p = add("bench", cmd_bench, "encoder latency and flop benchmark")
    p.add_argument("--checkpoint")
    p.add_argument("--approach", default="naive,saldr,masked")
    p.add_argument("--lambdas", default="4,8,16,32")
    p.add_argument("--category", type=int, default=4)
    p.add_argument("--repeats", type=int, default=10_000)
    p.add_argument("--parts", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--emit-plot-data", action="store_true")
    p.add_argument("--out")

    p = add("compare", cmd_compare, "params, flops and latency of all approaches side by side")
    p.add_argument("--cases", default="4,32", help="comma-separated |Lambda| values")
    p.add_argument("--data", help="dataset for the NMSE comparison (skipped if absent)")
    p.add_argument("--train-case", type=int, default=4, help="|Lambda| used for NMSE training")
    p.add_argument("--lambda-max", type=int, default=32)
    p.add_argument("--category", type=int, default=4)
    p.add_argument("--repeats", type=int, default=100, help="latency repeats (0 skips timing)")
    p.add_argument("--parts", type=int, default=128)
    _train_flags(p)
    _split_flags(p)
    p.add_argument("--emit-plot-data", action="store_true")
    p.add_argument("--outdir")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        defaults = json.loads(Path(args.config).read_text())
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(defaults) - known
        if unknown:
            parser.error(f"unknown keys in {args.config}: {sorted(unknown)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigurationError, RangeError, UsageError, TrainingError,
            FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
