"""Command-line entry point: ``uacgan <subcommand> [--config FILE] [flags] [--set section.key=value ...]``.

Settings are resolved with the precedence command line > config file >
defaults. Each command writes a self-describing run directory holding a
``config.json`` snapshot next to its outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
one-line JSON error record to stderr (and ``error.json`` in the run dir).
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import logging
import os
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .checkpoint import config_hash
from .synthbench import default_mog_config
from .trainer import TrainConfig

log = logging.getLogger("uacgan")

SUBCOMMANDS = ("train", "bench-mog", "estimate-mi", "score", "grid", "verify-theory")
OUT_ENV = "UACGAN_OUT"


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


@dataclass
class BenchOptions:
    kinds: str = "ac,tac,uac"
    runs: int = 5
    n_per_class: int = 10000
    variance_convention: bool = False
    plots: bool = True


@dataclass
class MIOptions:
    sampler: str = "gaussian"        # gaussian | mog | independent | sign
    rho: float = 0.5
    T_arch: str = "concat-T"
    steps: int = 3000
    batch: int = 512
    lr: float = 1e-3
    strategy: str = "permute"
    seed: int = 0


@dataclass
class ScoreOptions:
    checkpoint: str = ""
    n_samples: int = 10000
    n_splits: int = 10
    seed: int = 0


@dataclass
class GridOptions:
    checkpoint: str = ""
    class_index: int = 0
    rows: int = 8
    cols: int = 8
    seed: int = 0


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=lambda: default_mog_config("uac", backbone=None))
    bench: BenchOptions = field(default_factory=BenchOptions)
    mi: MIOptions = field(default_factory=MIOptions)
    score: ScoreOptions = field(default_factory=ScoreOptions)
    grid: GridOptions = field(default_factory=GridOptions)
    dataset: str = "mog"
    out_dir: str = ""
    data_cache: str = ""

    SECTIONS = {"train": TrainConfig, "bench": BenchOptions, "mi": MIOptions, "score": ScoreOptions,
                "grid": GridOptions}

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, value in d.items():
            if name in cls.SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"config field {name!r} must be an object")
                section = cls.SECTIONS[name]
                names = {f.name for f in dataclasses.fields(section)}
                bad = set(value) - names
                if bad:
                    raise ConfigError(f"unknown config field(s): {', '.join(f'{name}.{b}' for b in sorted(bad))}")
                try:
                    kwargs[name] = section(**value)
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"invalid value in {name!r}: {e}") from e
            else:
                kwargs[name] = value
        return cls(**kwargs)


def _field_type(section_cls, key: str):
    for f in dataclasses.fields(section_cls):
        if f.name == key:
            return f
    return None


def parse_value(raw: str) -> Any:
    """JSON literal if it parses (numbers, true/false, null, lists), else the raw string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(d: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    if len(parts) == 1:
        if parts[0] not in {f.name for f in dataclasses.fields(ExperimentConfig)} or parts[0] in ExperimentConfig.SECTIONS:
            raise ConfigError(f"unknown config field {dotted!r}")
        d[parts[0]] = value
        return
    if len(parts) != 2 or parts[0] not in ExperimentConfig.SECTIONS:
        raise ConfigError(f"unknown config field {dotted!r}")
    section, key = parts
    if _field_type(ExperimentConfig.SECTIONS[section], key) is None:
        raise ConfigError(f"unknown config field {dotted!r}")
    d.setdefault(section, {})[key] = value


def merge_config(file_cfg: Optional[dict], overrides: list[tuple[str, Any]]) -> ExperimentConfig:
    """defaults <- config file <- command-line overrides."""
    merged = ExperimentConfig().to_dict()
    for name, value in (file_cfg or {}).items():
        if name in ExperimentConfig.SECTIONS and isinstance(value, dict):
            for k, v in value.items():
                apply_override(merged, f"{name}.{k}", v)
        else:
            apply_override(merged, name, value)
    for dotted, value in overrides:
        apply_override(merged, dotted, value)
    return ExperimentConfig.from_dict(merged)


# --------------------------------------------------------------------------- argument parsing

# dedicated flags -> config field
FLAG_FIELDS = {
    "kind": "train.kind", "steps": "train.steps", "seed": "train.seed", "batch_size": "train.batch_size",
    "lambda_mi": "train.lambda_mi", "runs": "bench.runs", "kinds": "bench.kinds",
    "variance_convention": "bench.variance_convention", "dataset": "dataset",
    "checkpoint": None, "class_index": "grid.class_index", "n_samples": "score.n_samples",
    "rho": "mi.rho", "sampler": "mi.sampler", "T_arch": "mi.T_arch",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message, 2)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uacgan", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}",
                           parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="run directory (default: $UACGAN_OUT/<command>-<config hash>)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config field; values are JSON literals or strings")
        return sp

    t = common(sub.add_parser("train", help="train one model"))
    t.add_argument("--kind", choices=("ac", "tac", "uac"))
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lambda-mi", dest="lambda_mi", type=float)
    t.add_argument("--dataset", choices=("mog", "mnist", "mnist-5k", "cifar10"))
    t.add_argument("--resume", help="checkpoint to resume from")

    b = common(sub.add_parser("bench-mog", help="MoG MMD benchmark over several seeds"))
    b.add_argument("--kind", dest="kinds", help="objective kind(s), comma separated")
    b.add_argument("--runs", type=int)
    b.add_argument("--steps", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--variance-convention", dest="variance_convention", action="store_const", const=True,
                   help="read the component scales as variances instead of standard deviations")

    e = common(sub.add_parser("estimate-mi", help="standalone MINE estimate; writes (step, estimate) CSV"))
    e.add_argument("--sampler", choices=("gaussian", "mog", "independent", "sign"))
    e.add_argument("--rho", type=float)
    e.add_argument("--T-arch", dest="T_arch", choices=("concat-T", "projection-T"))

    s = common(sub.add_parser("score", help="IS/FID of a trained image generator"))
    s.add_argument("--checkpoint")
    s.add_argument("--dataset", choices=("mnist", "mnist-5k", "cifar10"))
    s.add_argument("--n-samples", dest="n_samples", type=int)

    g = common(sub.add_parser("grid", help="single-class sample grid (PNG)"))
    g.add_argument("--checkpoint")
    g.add_argument("--class", dest="class_index", type=int)

    common(sub.add_parser("verify-theory", help="run the exhaustive theory checks"))
    return p


def _emit_error(kind: str, message: str, code: int, run_dir: Optional[Path] = None) -> None:
    record = {"error": kind, "message": message, "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    if run_dir is not None and run_dir.exists():
        (run_dir / "error.json").write_text(json.dumps(record, indent=2))


def resolve_config(args) -> ExperimentConfig:
    file_cfg = None
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    overrides = []
    for flag, dotted in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is None or dotted is None:
            continue
        overrides.append((dotted, value))
    if getattr(args, "checkpoint", None):
        overrides.append((("score" if args.command == "score" else "grid") + ".checkpoint", args.checkpoint))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        overrides.append((key.strip(), parse_value(raw)))
    return merge_config(file_cfg, overrides)


def run_dir_for(cfg: ExperimentConfig, command: str, out: Optional[str]) -> Path:
    if out:
        return Path(out)
    root = Path(cfg.out_dir or os.environ.get(OUT_ENV) or "runs")
    return root / f"{command}-{cfg.hash()[:10]}"


# --------------------------------------------------------------------------- commands


def _mog_spec(cfg: ExperimentConfig):
    from .synthbench import MoGSpec
    return MoGSpec(variance_convention=cfg.bench.variance_convention)


def _dataset(cfg: ExperimentConfig):
    if cfg.dataset == "mog":
        from .trainer import SamplerDataset
        spec = _mog_spec(cfg)
        return SamplerDataset(spec.sampler(), spec.label_spec, (1,))
    from .imagebench import load_dataset
    return load_dataset(cfg.dataset, root=cfg.data_cache or None)


def cmd_train(cfg: ExperimentConfig, run_dir: Path, args) -> int:
    from .trainer import fit, save_checkpoint
    data = _dataset(cfg)
    state, rows = fit(cfg.train, data, out_dir=run_dir, resume=getattr(args, "resume", None))
    save_checkpoint(state, run_dir / "final.ckpt")
    if cfg.dataset == "mog":
        from .plots import plot_bundle
        plot_bundle(_mog_spec(cfg), state.bundle, run_dir / "density.png", title=cfg.train.kind.upper() + "-GAN")
    (run_dir / "summary.json").write_text(json.dumps({"step": state.step, "running_means": state.running_means()},
                                                     indent=2))
    print(f"trained {state.step} steps -> {run_dir}")
    return 0


def cmd_bench_mog(cfg: ExperimentConfig, run_dir: Path, args) -> int:
    from .plots import plot_bundle
    from .synthbench import real_vs_real, run_mog_benchmark
    spec = _mog_spec(cfg)
    summary = {"null_control": real_vs_real(spec, cfg.bench.n_per_class)}
    rows = []
    for kind in cfg.bench.kinds.split(","):
        kind = kind.strip()
        bundles: list = []
        train_cfg = dataclasses.replace(cfg.train, kind=kind)
        rep = run_mog_benchmark(kind, cfg.bench.runs, train_cfg, spec, cfg.bench.n_per_class, seed=cfg.train.seed,
                                keep_bundles=bundles)
        for r in rep.runs:
            for c in rep.COLUMNS:
                rows.append({"kind": kind, "seed": r["seed"], "column": c, "mmd2": r[c],
                             "bandwidth": rep.bandwidth, "n_per_class": rep.n_per_class})
        summary[kind] = {"summary": rep.summary(), "bandwidth": rep.bandwidth, "errors": rep.errors}
        if cfg.bench.plots and bundles:
            plot_bundle(spec, bundles[0], run_dir / f"density_{kind}.png", title=kind.upper() + "-GAN")
        for c, s in rep.summary().items():
            if s:
                print(f"{kind:4s} {c:9s} {s['mean']:.4g} +- {s['std']:.4g} (median {s['median']:.4g})")
    with open(run_dir / "mmd.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["kind", "seed", "column", "mmd2", "bandwidth", "n_per_class"])
        w.writeheader()
        w.writerows(rows)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    failed = any(summary[k.strip()]["errors"] for k in cfg.bench.kinds.split(","))
    return 1 if failed else 0


def make_sampler(opts: MIOptions):
    from . import mine
    from .synthbench import MoGSpec
    if opts.sampler == "gaussian":
        return mine.gaussian_pair_sampler(opts.rho), None
    if opts.sampler == "sign":
        return mine.sign_bucket_sampler(opts.rho), 2
    if opts.sampler == "independent":
        return mine.independent_sampler(3), 3
    if opts.sampler == "mog":
        spec = MoGSpec()
        return spec.sampler(), spec.K
    raise ConfigError(f"unknown sampler {opts.sampler!r}")


def cmd_estimate_mi(cfg: ExperimentConfig, run_dir: Path, args) -> int:
    from .mine import estimate_mi_standalone
    o = cfg.mi
    sampler, K = make_sampler(o)
    arch = o.T_arch if K else "concat-T"
    trace: list = []
    est = estimate_mi_standalone(sampler, arch, o.steps, o.batch, K=K, lr=o.lr, strategy=o.strategy,
                                 seed=o.seed, trace=trace)
    with open(run_dir / "estimates.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "estimate"])
        w.writerows((s, repr(v)) for s, v in trace)
    (run_dir / "result.json").write_text(json.dumps({"estimate": est, "T_arch": arch, "sampler": o.sampler}, indent=2))
    print(f"MI estimate: {est:.4f} nats")
    return 0


def _load_bundle(path: str):
    from .trainer import load_checkpoint
    if not path:
        raise ConfigError("a checkpoint path is required (--checkpoint)")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path).bundle


def cmd_score(cfg: ExperimentConfig, run_dir: Path, args) -> int:
    from .imagebench import load_dataset, score_generator
    if cfg.dataset == "mog":
        raise ConfigError("score needs an image dataset (--dataset mnist, mnist-5k or cifar10)")
    bundle = _load_bundle(cfg.score.checkpoint)
    ds = load_dataset(cfg.dataset, root=cfg.data_cache or None)
    rep = score_generator(bundle, ds, cfg.score.n_samples, seed=cfg.score.seed, n_splits=cfg.score.n_splits)
    (run_dir / "score.json").write_text(rep.to_json())
    print(rep.to_json())
    return 0


def cmd_grid(cfg: ExperimentConfig, run_dir: Path, args) -> int:
    from .imagebench import class_grid
    g = cfg.grid
    bundle = _load_bundle(g.checkpoint)
    res = class_grid(bundle, g.class_index, g.rows, g.cols, run_dir / f"class_{g.class_index}.png", seed=g.seed)
    (run_dir / "grid.json").write_text(json.dumps({"path": str(res.path), "variance": res.variance,
                                                   "collapsed": res.collapsed}, indent=2))
    print(f"wrote {res.path} (variance {res.variance:.4g}{', COLLAPSED' if res.collapsed else ''})")
    return 0


def cmd_verify_theory(cfg: ExperimentConfig, run_dir: Path, args) -> int:
    from .oracle import verify_theory
    results = verify_theory()
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    (run_dir / "theory.json").write_text(json.dumps([dataclasses.asdict(r) for r in results], indent=2))
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"train": cmd_train, "bench-mog": cmd_bench_mog, "estimate-mi": cmd_estimate_mi,
            "score": cmd_score, "grid": cmd_grid, "verify-theory": cmd_verify_theory}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    run_dir = None
    try:
        cfg = resolve_config(args)
        run_dir = run_dir_for(cfg, args.command, args.out)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return COMMANDS[args.command](cfg, run_dir, args)
    except ConfigError as e:
        _emit_error("config", str(e), 2, run_dir)
        return 2
    except Exception as e:  # runtime failures become exit code 1 with a record
        log.debug("%s", traceback.format_exc())
        _emit_error(type(e).__name__, str(e), 1, run_dir)
        return 1


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
