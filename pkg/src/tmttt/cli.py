"""Command-line entry point: ``tmttt <synth|train|eval|ablate|bench|gradcheck|probe> ...``.

Settings come from flat ``key=value`` files (``--config``) plus ``--set key=value``
overrides.  Keys are grouped by prefix: ``data.*``, ``window.*``, ``model.*``,
``train.*``, ``synth.*`` and ``bench.*``.  Every run writes into one directory
with the effective config (``config.txt``) and a list of outputs
(``run_manifest.txt``); wall-clock timestamps go only to ``run.log``.

Exit codes: 0 success, 1 configuration error or bad usage, 2 data error,
3 a numerical check (gradcheck) failed.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .complexity import (
    MODEL_KINDS,
    MODULE_KINDS,
    DimSpec,
    measure_scaling,
    measure_tta_overhead,
    model_complexity,
    module_complexity,
    reports_to_csv,
)
from .config import config_hash, dump_kv, from_kv, parse_kv, read_kv
from .data import (
    DEFAULT_RATIOS,
    SplitWindows,
    SyntheticSpec,
    WindowSpec,
    load_csv,
    split_windows,
    synth_generate,
    write_csv,
)
from .errors import ConfigError, DataError
from .layers import CONV_VARIANTS, AttentionBlock
from .model import TimeMachine, TimeMachineConfig, load_checkpoint, save_checkpoint
from .ssm import SSMBlock
from .training import (
    EvalReport,
    TrainConfig,
    evaluate,
    fit,
    orthogonality_probe,
    persistence_baseline,
    predict,
    test_time_adapt_evaluate,
)
from .ttt import TTTBlock, TTTConfig

THREADS_ENV = "TMTTT_THREADS"
EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 1, 2, 3
PREFIXES = ("data", "window", "model", "train", "synth", "bench")

# extended look-back / horizon grid, at desk-scale widths
EXTENDED_GRID = [(L, T) for L in (2880, 5760, 720) for T in (192, 336, 720, 96)]
PRESETS = {
    "desk": {"window.L": "96", "window.T": "24", "model.n1": "64", "model.n2": "32"},
    **{
        f"L{L}-T{T}": {"window.L": str(L), "window.T": str(T), "model.n1": "64", "model.n2": "32",
                       "train.batch_size": "8"}
        for L, T in EXTENDED_GRID
    },
}


# configuration -----------------------------------------------------------------------

@dataclass
class RunConfig:
    values: dict
    window: WindowSpec
    train: TrainConfig
    ratios: tuple = DEFAULT_RATIOS
    data_path: str | None = None
    dataset: str = "synthetic"
    data_seed: int = 0
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    model_values: dict = field(default_factory=dict)

    def model_config(self, M) -> TimeMachineConfig:
        vals = {**self.model_values, "M": str(M), "L": str(self.window.L), "T": str(self.window.T)}
        return from_kv(TimeMachineConfig, vals)

    def hash(self, M) -> str:
        return config_hash(self.model_config(M), self.train, self.window)


def _group(values, prefix):
    return {k[len(prefix) + 1:]: v for k, v in values.items() if k.startswith(prefix + ".")}


def build_run_config(values: dict) -> RunConfig:
    for key in values:
        if key.split(".", 1)[0] not in PREFIXES or "." not in key:
            raise ConfigError(f"unknown config key {key!r}; keys start with one of {PREFIXES}")
    data = _group(values, "data")
    unknown = set(data) - {"path", "name", "ratios", "seed"}
    if unknown:
        raise ConfigError(f"unknown data keys: {sorted(unknown)}")
    model_values = _group(values, "model")
    for k in ("M", "L", "T"):
        if k in model_values:
            raise ConfigError(f"model.{k} is derived from the data and window settings")
    ratios = tuple(float(r) for r in data["ratios"].split(",")) if "ratios" in data else DEFAULT_RATIOS
    window_vals = _group(values, "window")
    window_vals.setdefault("L", "96")
    window_vals.setdefault("T", "24")
    run = RunConfig(
        values=dict(values),
        window=from_kv(WindowSpec, window_vals),
        train=from_kv(TrainConfig, _group(values, "train")),
        ratios=ratios,
        data_path=data.get("path") or None,
        dataset=data.get("name") or (Path(data["path"]).stem if data.get("path") else "synthetic"),
        data_seed=int(data.get("seed", 0)),
        synth=from_kv(SyntheticSpec, _group(values, "synth")),
        model_values=model_values,
    )
    run.model_config(1)  # validate model keys early
    return run


def effective_values(run: RunConfig, M=None) -> dict:
    """Fully expanded settings; feeding them back through --config reproduces the run."""
    out = {}
    if run.data_path:
        out["data.path"] = run.data_path
    out["data.name"] = run.dataset
    out["data.ratios"] = run.ratios
    out["data.seed"] = run.data_seed
    for f in fields(WindowSpec):
        out[f"window.{f.name}"] = getattr(run.window, f.name)
    if M is not None:
        cfg = run.model_config(M)
        for f in fields(TimeMachineConfig):
            if f.name not in ("M", "L", "T"):
                out[f"model.{f.name}"] = getattr(cfg, f.name)
    for f in fields(TrainConfig):
        out[f"train.{f.name}"] = getattr(run.train, f.name)
    if not run.data_path:
        for f in fields(SyntheticSpec):
            out[f"synth.{f.name}"] = getattr(run.synth, f.name)
    for k, v in run.values.items():
        if k.startswith("bench."):
            out[k] = v
    return out


def gather_values(args) -> dict:
    values = {}
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[args.preset])
    if getattr(args, "config", None):
        values.update(read_kv(args.config))
    for item in getattr(args, "set", None) or []:
        values.update(parse_kv(item, "--set"))
    if getattr(args, "data", None):
        values["data.path"] = args.data
    return values


# run directory ------------------------------------------------------------------------

class RunDir:
    def __init__(self, path, command):
        self.path = Path(path)
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {self.path}: {exc}") from exc
        self.command = command
        self.outputs: list[str] = []

    def file(self, name) -> Path:
        self.outputs.append(name)
        return self.path / name

    def write(self, name, text):
        self.file(name).write_text(text)

    def log(self, message):
        print(message)
        stamp = datetime.datetime.now().isoformat(timespec="seconds")
        with (self.path / "run.log").open("a") as fh:
            fh.write(f"{stamp} {message}\n")

    def finish(self, values: dict):
        self.write("config.txt", dump_kv(dict(sorted(values.items()))))
        lines = [f"command={self.command}\n"] + [f"output={o}\n" for o in sorted(set(self.outputs))]
        (self.path / "run_manifest.txt").write_text("".join(lines))


# data ---------------------------------------------------------------------------------

def load_series(run: RunConfig):
    if run.data_path:
        path = Path(run.data_path)
        if not path.is_file():
            raise DataError(f"data file not found: {path}")
        return load_csv(path)
    return synth_generate(run.synth, run.data_seed)


def load_splits(run: RunConfig, window=None) -> tuple:
    series = load_series(run)
    return series, split_windows(series, window or run.window, run.ratios)


# subcommands --------------------------------------------------------------------------

def cmd_synth(args):
    values = read_kv(args.spec) if args.spec else {}
    values = {k[len("synth."):] if k.startswith("synth.") else k: v for k, v in values.items()}
    for item in args.set or []:
        values.update(parse_kv(item, "--set"))
    spec = from_kv(SyntheticSpec, values)
    series = synth_generate(spec, args.seed)
    write_csv(series, args.out)
    print(f"wrote {series.M} channels x {series.N} steps to {args.out}")
    return 0


def _train_one(run: RunConfig, splits: SplitWindows, M, seed, block_kind=None, conv=None, T=None):
    cfg = run.model_config(M)
    if block_kind or conv or T:
        overrides = {k: v for k, v in (("block_kind", block_kind), ("conv_variant", conv), ("T", T)) if v}
        cfg = TimeMachineConfig(**{**cfg.__dict__, **overrides})
    model = TimeMachine(cfg, seed=seed)
    result = fit(model, splits.train, splits.val, run.train, seed=seed)
    return model, result


def cmd_train(args):
    run = build_run_config(gather_values(args))
    out = RunDir(args.out, "train")
    series, splits = load_splits(run)
    seed = args.seed if args.seed is not None else run.train.seeds[0]
    out.log(f"training on {run.dataset}: {len(splits.train)} train / {len(splits.val)} val windows, seed {seed}")
    model, result = _train_one(run, splits, series.M, seed)
    save_checkpoint(model, out.path / "checkpoint")
    out.outputs.append("checkpoint/")
    rows = "".join(f"{i + 1},{a!r},{b!r}\n" for i, (a, b) in enumerate(zip(result.train_loss, result.val_loss)))
    out.write("trace.csv", "epoch,train_mse,val_mse\n" + rows)
    from .plotting import plot_loss_curve

    plot_loss_curve(result.train_loss, result.val_loss, out.file("loss.png"), title=f"{run.dataset} seed {seed}")
    out.log(f"best epoch {result.best_epoch + 1}, validation MSE {result.best_val:.6f}")
    out.finish({**effective_values(run, series.M), "train.seeds": (seed,)})
    return 0


def _checkpoint_run(args):
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.txt").is_file():
        raise DataError(f"no checkpoint manifest in {ckpt}")
    model = load_checkpoint(ckpt)
    values = {}
    for cand in (ckpt / "config.txt", ckpt.parent / "config.txt"):
        if cand.is_file():
            values = read_kv(cand)
            break
    values = {k: v for k, v in values.items() if not k.startswith("model.")}
    values.update(gather_values(args))
    values["window.L"], values["window.T"] = str(model.cfg.L), str(model.cfg.T)
    return model, build_run_config(values)


def cmd_eval(args):
    model, run = _checkpoint_run(args)
    out = RunDir(args.out, "eval")
    series, splits = load_splits(run)
    if series.M != model.cfg.M:
        raise DataError(f"checkpoint expects {model.cfg.M} channels, data has {series.M}")
    h = run.hash(series.M)
    seed = run.train.seeds[0]
    report = evaluate(model, splits.test, run.dataset, h, seed)
    steps = args.tta_steps if args.tta_steps is not None else run.train.tta_steps
    if steps:
        lr = args.tta_lr if args.tta_lr is not None else run.train.tta_lr
        report.extend(test_time_adapt_evaluate(model, splits.test, steps, lr, f"{run.dataset}+tta{steps}", h, seed))
    p_mse, p_mae = persistence_baseline(splits.test)
    out.write("eval.csv", report.to_csv())
    out.write("eval.txt", report.table() + f"persistence baseline: MSE {p_mse:.4f}  MAE {p_mae:.4f}\n")
    from .plotting import plot_forecast

    pred = predict(model, splits.test.X[:1])
    plot_forecast(splits.test.X[0], splits.test.Y[0], pred[0], out.file("forecast.png"), title=run.dataset)
    out.log(report.table().rstrip())
    out.finish(effective_values(run, series.M))
    return 0


def _csv_list(text, cast=str):
    return [cast(t.strip()) for t in text.split(",") if t.strip()]


def cmd_ablate(args):
    run = build_run_config(gather_values(args))
    out = RunDir(args.out, "ablate")
    blocks = _csv_list(args.blocks)
    horizons = _csv_list(args.horizons, int) if args.horizons else [run.window.T]
    variants = _csv_list(args.variants) if args.variants else list(CONV_VARIANTS)
    for v in variants:
        if v not in CONV_VARIANTS:
            raise ConfigError(f"unknown conv variant {v!r}")
    header = "block_kind,variant,dataset,config_hash,seed,horizon,mse,mae\n"
    lines = []
    grid = {}
    series = load_series(run)
    for T in horizons:
        window = WindowSpec(run.window.L, T, run.window.stride)
        splits = split_windows(series, window, run.ratios)
        for kind in blocks:
            for variant in variants:
                for seed in run.train.seeds:
                    model, _ = _train_one(run, splits, series.M, seed, kind, variant, T)
                    h = config_hash(model.cfg, run.train, window)
                    row = evaluate(model, splits.test, run.dataset, h, seed).rows[0]
                    lines.append(f"{kind},{variant},{row.dataset},{h},{seed},{T},{row.mse!r},{row.mae!r}\n")
                    grid.setdefault((kind, T), {}).setdefault(variant, []).append((row.mse, row.mae))
                    out.log(f"{kind:<4} {variant:<10} T={T:<4} seed={seed} MSE {row.mse:.4f} MAE {row.mae:.4f}")
    out.write("ablation.csv", header + "".join(lines))
    from .plotting import plot_ablation

    table = [f"{'block':<6}{'horizon':>8}  {'variant':<10}{'MSE':>10}{'MAE':>10}"]
    for (kind, T), cells in grid.items():
        mse = [float(np.mean([c[0] for c in cells[v]])) for v in variants]
        mae = [float(np.mean([c[1] for c in cells[v]])) for v in variants]
        table += [f"{kind:<6}{T:>8}  {v:<10}{a:>10.4f}{b:>10.4f}" for v, a, b in zip(variants, mse, mae)]
        plot_ablation(variants, mse, mae, out.file(f"ablation_{kind}_T{T}.png"), title=f"{kind} blocks, horizon {T}")
    out.write("ablation.txt", "\n".join(table) + "\n")
    out.finish(effective_values(run, series.M))
    return 0


def _scaling_workload(kind, d, rng):
    if kind == "TTT":
        block = TTTBlock(TTTConfig(d), rng)
    elif kind == "SSM":
        block = SSMBlock(d, 16, True, rng=rng)
    else:
        block = AttentionBlock(d, rng)

    def prepare(T):
        X = rng.normal(size=(T, d))
        return lambda: block(X)

    return prepare


def cmd_bench(args):
    run = build_run_config(gather_values(args))
    out = RunDir(args.out, "bench")
    bench = _group(run.values, "bench")
    dim_vals = {"T": "96", "d": "64", "N": "4096", "U": "1", "k": "3", "C_in": "64", "C_out": "64",
                "patch_size": "16", "n_variates": "7"}
    dim_vals.update({k: v for k, v in bench.items() if k in {f.name for f in fields(DimSpec)}})
    dims = from_kv(DimSpec, dim_vals)
    reports = [module_complexity(k, dims) for k in MODULE_KINDS] + [model_complexity(k, dims) for k in MODEL_KINDS]
    out.write("complexity.csv", reports_to_csv(reports))

    rng = np.random.default_rng(0)
    lengths = _csv_list(args.lengths, int)
    timings = {}
    for kind in ("TTT", "SSM", "Attention"):
        rep = measure_scaling(_scaling_workload(kind, args.width, rng), lengths, args.trials)
        timings[kind] = rep
        out.write(f"scaling_{kind.lower()}.csv", rep.to_csv())
        out.log(f"{kind:<9} slope {rep.slope:.3f}")
    summary = {f"slope.{k.lower()}": round(r.slope, 4) for k, r in timings.items()}

    cfg = TimeMachineConfig(M=4, L=96, T=24, dropout=0.0)
    model = TimeMachine(cfg, seed=0)
    x = synth_generate(SyntheticSpec(M=4, N=96), 0).values
    tta = measure_tta_overhead(model, x, [0, 1, 2, 4], trials=args.trials)
    out.write("tta_overhead.csv", tta.to_csv())
    summary.update({f"tta.delta_ms.U{u}": round(dl * 1e3, 3) for u, dl in zip(tta.U_values, tta.latency_delta)})
    summary.update({f"tta.tape_bytes.U{u}": m for u, m in zip(tta.U_values, tta.memory_bytes)})
    out.write("bench_summary.txt", f"# {tta.note}\n" + dump_kv(summary))
    from .plotting import plot_scaling, plot_tta_overhead

    plot_scaling(timings, out.file("scaling.png"))
    plot_tta_overhead(tta, out.file("tta_overhead.png"))
    out.finish({**effective_values(run), **{f"bench.{k}": v for k, v in dim_vals.items()}})
    return 0


def cmd_gradcheck(args):
    from .oracles import TOLERANCE, run_oracles

    out = RunDir(args.out, "gradcheck")
    results = run_oracles(seed=args.seed, names=_csv_list(args.only) if args.only else None)
    lines = ["check,max_relative_error,status\n"]
    failed = 0
    for name, err in results.items():
        ok = err <= TOLERANCE
        failed += not ok
        lines.append(f"{name},{err!r},{'PASS' if ok else 'FAIL'}\n")
        out.log(f"{'PASS' if ok else 'FAIL'} {name:<28} {err:.3e}")
    out.write("gradcheck.csv", "".join(lines))
    out.finish({"gradcheck.seed": args.seed, "gradcheck.tolerance": TOLERANCE})
    return EXIT_CHECK if failed else 0


def cmd_probe(args):
    model, run = _checkpoint_run(args)
    out = RunDir(args.out, "probe")
    series, splits = load_splits(run)
    n = min(args.batch, len(splits.test))
    res = orthogonality_probe(model, (splits.test.X[:n], splits.test.Y[:n]), step=args.step)
    values = {
        "cosine": "undefined" if res.undefined else repr(res.cosine),
        "dot": res.dot,
        "delta_main": res.delta_main,
        "main_grad_norm": res.main_norm,
        "self_grad_norm": res.self_norm,
        "windows": n,
        "step": args.step,
    }
    out.write("probe.txt", dump_kv(values))
    out.log(" ".join(f"{k}={v}" for k, v in values.items()))
    out.finish(effective_values(run, series.M))
    return 0


# parser -------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_config_args(p):
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--preset", help=f"named settings: {', '.join(sorted(PRESETS))}")
    p.add_argument("--data", help="CSV file (timestamp column then one column per channel)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tmttt", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic CSV")
    p.add_argument("--spec", help="key=value synthetic spec")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    _add_config_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tta-steps", type=int)
    p.add_argument("--tta-lr", type=float)
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep conv variants x block kinds x horizons")
    _add_config_args(p)
    p.add_argument("--blocks", default="TTT")
    p.add_argument("--variants", help="comma list (default: all seven)")
    p.add_argument("--horizons", help="comma list (default: window.T)")
    p.add_argument("--out", default="runs/ablate")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="operation counts, scaling slopes and adaptation overhead")
    _add_config_args(p)
    p.add_argument("--lengths", default="256,512,1024,2048")
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--out", default="runs/bench")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", help="comma list of check-name prefixes")
    p.add_argument("--out", default="runs/gradcheck")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("probe", help="forecast vs self-supervised gradient alignment")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--out", default="runs/probe")
    p.set_defaults(func=cmd_probe)
    return parser


@contextlib.contextmanager
def _thread_cap():
    limit = os.environ.get(THREADS_ENV)
    if not limit:
        yield
        return
    try:
        n = int(limit)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {limit!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_CONFIG
        with _thread_cap():
            return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
