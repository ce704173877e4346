"""Command-line entry point: gen-data, train, eval, md, bench, ablate.

Config files are JSON::

    {"schema_version": 1,
     "model": {"preset": "toy", "k": 12},
     "train": {"epochs": 20, "lr": 1e-3},
     "seed": 0, "dataset": "data/lj", "out": "runs/a"}

Command-line flags override file values.  ``ATTNPOT_OUT`` sets a default
output directory and ``ATTNPOT_THREADS`` a default thread count.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

SCHEMA_VERSION = 1
TOGGLE_KEYS = {"lae": "lae", "nodeatt": "node_attention", "erope": "erope"}


class CLIError(Exception):
    """Validation failure: reported as a structured message with exit code 1."""


@dataclass
class RunConfig:
    command: str
    dataset: Path | None = None
    checkpoint: Path | None = None
    out: Path | None = None
    seed: int = 0
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--dtype", choices=("fp64", "fp32"))
    common.add_argument("--threads", type=int, help="BLAS thread count (set before numpy loads)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--toggle", action="append", default=[], metavar="NAME=on|off",
                       help="lae, nodeatt or erope switched on or off")

    p = argparse.ArgumentParser(prog="attnpot", description="Attention-based interatomic potential toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a labeled toy dataset")
    g.add_argument("--potential", choices=("lj", "yukawa"), default="lj")
    g.add_argument("--frames", type=int, default=100)
    g.add_argument("--atoms", type=int, default=16)
    g.add_argument("--open", action="store_true", help="open-boundary LJ clusters instead of periodic boxes")
    g.add_argument("--screening", type=float, default=10.0, help="Yukawa screening length (Å)")

    t = sub.add_parser("train", parents=[common, model], help="train a model")
    t.add_argument("--dataset", type=Path)
    t.add_argument("--epochs", type=int)
    t.add_argument("--force-mode", choices=("direct", "conservative"))

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint and run the check battery")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--dataset", type=Path)
    e.add_argument("--split", default="val", choices=("train", "val", "test"))
    e.add_argument("--force-mode", choices=("direct", "conservative"))
    e.add_argument("--no-checks", action="store_true")

    m = sub.add_parser("md", parents=[common], help="run molecular dynamics")
    m.add_argument("--checkpoint", type=Path, help="model checkpoint (default: exact LJ forces)")
    m.add_argument("--dataset", type=Path)
    m.add_argument("--frame", type=int, default=0, help="index of the starting test frame")
    m.add_argument("--ensemble", choices=("nve", "nvt"), default="nve")
    m.add_argument("--steps", type=int, default=1000)
    m.add_argument("--dt", type=float, default=0.5, help="time step (fs)")
    m.add_argument("--temperature", type=float, default=50.0, help="initial / bath temperature (K)")
    m.add_argument("--friction", type=float, default=0.01, help="Langevin friction (1/fs)")
    m.add_argument("--stride", type=int, default=10)
    m.add_argument("--force-mode", choices=("direct", "conservative"))

    b = sub.add_parser("bench", parents=[common, model], help="throughput and complexity benchmark")
    b.add_argument("--sizes", type=str, help="comma-separated atom counts (default 64..16384 by sqrt 2)")
    b.add_argument("--repeats", type=int, default=7)
    b.add_argument("--warmups", type=int, default=2)
    b.add_argument("--fwd-bwd-max-atoms", type=int, default=1024)
    b.add_argument("--compare-nodeatt", action="store_true", help="also time the model with node attention off")

    a = sub.add_parser("ablate", parents=[common, model], help="train a grid of component ablations")
    a.add_argument("--dataset", type=Path)
    a.add_argument("--grid", default="lae,nodeatt,erope", help="components switched off one at a time")
    a.add_argument("--epochs", type=int)
    return p


def _read_config(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.is_file():
        raise CLIError(f"config file {path} not found")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CLIError(f"config file {path}: {exc}") from None
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise CLIError(f"config schema_version {version} unsupported (expected {SCHEMA_VERSION})")
    unknown = set(cfg) - {"schema_version", "model", "train", "seed", "dataset", "out", "checkpoint"}
    if unknown:
        raise CLIError(f"unknown config keys {sorted(unknown)}")
    return cfg


def _parse_toggles(items: list[str]) -> dict:
    out = {}
    for item in items:
        name, _, value = item.partition("=")
        if name not in TOGGLE_KEYS or value not in ("on", "off"):
            raise CLIError(f"bad --toggle {item!r}; expected one of {sorted(TOGGLE_KEYS)} = on|off")
        out[TOGGLE_KEYS[name]] = value == "on"
    return out


def _resolve(args) -> RunConfig:
    file_cfg = _read_config(getattr(args, "config", None))
    pick = lambda flag, key: flag if flag is not None else file_cfg.get(key)
    out = pick(args.out, "out") or os.environ.get("ATTNPOT_OUT")
    rc = RunConfig(
        command=args.command,
        dataset=Path(d) if (d := pick(getattr(args, "dataset", None), "dataset")) else None,
        checkpoint=Path(c) if (c := pick(getattr(args, "checkpoint", None), "checkpoint")) else None,
        out=Path(out) if out else None,
        seed=int(pick(args.seed, "seed") or 0),
        model=dict(file_cfg.get("model", {})),
        train=dict(file_cfg.get("train", {})),
    )
    if args.dtype:
        rc.model["dtype"] = args.dtype
    rc.model.update(_parse_toggles(getattr(args, "toggle", [])))
    if getattr(args, "epochs", None) is not None:
        rc.train["epochs"] = args.epochs
    if getattr(args, "force_mode", None) and rc.command in ("train", "ablate"):
        rc.train["force_mode"] = args.force_mode
        rc.model["force_mode"] = args.force_mode
    if rc.dataset is not None and not rc.dataset.is_dir():
        raise CLIError(f"dataset directory {rc.dataset} not found")
    if rc.checkpoint is not None and not rc.checkpoint.is_file():
        raise CLIError(f"checkpoint {rc.checkpoint} not found")
    if rc.command in ("train", "ablate") and rc.dataset is None:
        raise CLIError(f"{rc.command} needs --dataset")
    return rc


def _model_config(overrides: dict):
    from .model import ModelConfig

    d = dict(overrides)
    preset = d.pop("preset", None)
    try:
        return ModelConfig.preset(preset, **d) if preset else ModelConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"model config: {exc}") from None


def _train_config(overrides: dict, seed: int):
    from .training import TrainConfig

    try:
        return TrainConfig.from_dict({**overrides, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise CLIError(f"train config: {exc}") from None


class _Staging:
    """Write outputs to a sibling temp dir and move them into place on success."""

    def __init__(self, out: Path | None):
        self.out = out
        self.dir: Path | None = None

    def __enter__(self) -> Path | None:
        if self.out is None:
            return None
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=f".{self.out.name}-", dir=self.out.parent))
        return self.dir

    def __exit__(self, exc_type, exc, tb):
        if self.dir is None:
            return False
        if exc_type is not None:
            shutil.rmtree(self.dir, ignore_errors=True)
            return False
        if not self.out.exists():
            os.replace(self.dir, self.out)
            return False
        for item in sorted(self.dir.rglob("*")):
            target = self.out / item.relative_to(self.dir)
            if item.is_dir():
                target.mkdir(parents=True, exist_ok=True)
            else:
                target.parent.mkdir(parents=True, exist_ok=True)
                os.replace(item, target)
        shutil.rmtree(self.dir, ignore_errors=True)
        return False


def _say(msg: str) -> None:
    print(msg, flush=True)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, rc: RunConfig) -> int:
    from .dataio import generate_coulomb_dataset, generate_lj_dataset

    if rc.out is None:
        raise CLIError("gen-data needs --out")
    if args.frames < 1 or args.atoms < 2:
        raise CLIError("--frames must be >= 1 and --atoms >= 2")
    if args.potential == "lj":
        ds = generate_lj_dataset(args.frames, args.atoms, seed=rc.seed, periodic=not args.open)
    else:
        ds = generate_coulomb_dataset(args.frames, args.atoms, screening=args.screening, seed=rc.seed)
    with _Staging(rc.out) as d:
        ds.save(d)
    m = ds.manifest()
    _say(f"gen-data: {m['frames']} frames ({m['train']} train / {m['val']} val / {m['test']} test) -> {rc.out}")
    return 0


def cmd_train(args, rc: RunConfig) -> int:
    from .dataio import Dataset
    from .model import Potential
    from .training import train

    ds = Dataset.load(rc.dataset)
    cfg = _model_config(rc.model)
    tcfg = _train_config(rc.train, rc.seed)
    pot = Potential(replace(cfg, force_mode=tcfg.force_mode), seed=rc.seed)
    with _Staging(rc.out) as d:
        pot, hist = train(pot, ds, tcfg, out_dir=d, log=lambda s: _say(f"train: {s}"))
        if d is not None:
            (d / "config.json").write_text(json.dumps(
                {"schema_version": SCHEMA_VERSION, "model": pot.cfg.to_dict(), "train": tcfg.to_dict(),
                 "seed": rc.seed, "dataset": str(rc.dataset)}, indent=2, sort_keys=True))
    last = hist[-1]
    _say(f"train: done, final {last.split} energy MAE {last.energy_mae:.4f} meV/atom, "
         f"force MAE {last.force_mae:.4f} meV/A" + (f" -> {rc.out}" if rc.out else ""))
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    from . import evalbench as eb
    from .dataio import Dataset
    from .model import Potential
    from .training import evaluate, write_table

    pot = Potential.load(rc.checkpoint)
    if args.dtype:
        pot = pot.with_config(dtype=args.dtype)
    manifest_path = Path(str(rc.checkpoint) + ".json")
    meta = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    dataset = rc.dataset or (Path(meta["dataset"]) if "dataset" in meta else None)
    if dataset is None:
        cfg_json = rc.checkpoint.parent / "config.json"
        if cfg_json.exists():
            dataset = Path(json.loads(cfg_json.read_text())["dataset"])
    if dataset is None or not Path(dataset).is_dir():
        raise CLIError("eval needs --dataset (none recorded next to the checkpoint)")
    ds = Dataset.load(dataset)
    frames = ds.subset(args.split)
    if not frames:
        raise CLIError(f"dataset has no {args.split!r} frames")
    mode = args.force_mode or pot.cfg.force_mode
    tc = meta.get("train_config", {})
    rep = evaluate(pot, frames, mode, lambda_e=tc.get("lambda_e", 4.0), lambda_f=tc.get("lambda_f", 100.0))
    rep.split = args.split
    rep.epoch = int(meta.get("best_epoch", -1))
    reports = []
    if not args.no_checks:
        th = eb.load_thresholds()
        systems = [f.system for f in frames[:4]]
        reports.append(eb.check_translation_permutation(pot, systems, 20, rc.seed, th["invariance_energy_ev"]))
        rot = eb.check_rotation_invariance(pot, systems, 20, rc.seed, th["invariance_energy_ev"])
        rot.hard = pot.cfg.direction_features != "raw"
        reports.append(rot)
        reports.append(eb.check_rotation_cosine(pot, systems, 2, mode=mode, seed=rc.seed))
        if pot.cfg.knn_soft:
            reports.append(eb.check_force_consistency(pot, systems[:2], threshold=th["gradient_relative"]))
        reports.append(eb.check_extensivity(pot, systems[0]))
    with _Staging(rc.out) as d:
        if d is not None:
            write_table(d / "metrics.csv", [rep.row()])
            if reports:
                eb.write_reports(reports, d)
    code = eb.suite_exit_code(reports)
    _say(f"eval: {args.split} energy MAE {rep.energy_mae:.4f} meV/atom, force MAE {rep.force_mae:.4f} meV/A; "
         f"{sum(r.passed for r in reports)}/{len(reports)} checks passed")
    return code


def cmd_md(args, rc: RunConfig) -> int:
    from .dataio import Dataset, generate_lj_dataset
    from .dynamics import MDBlowUp, MDState, atomic_masses, lj_potential, maxwell_boltzmann, model_potential, run_md
    from .model import Potential

    import numpy as np

    if rc.dataset is not None:
        ds = Dataset.load(rc.dataset)
        pool = ds.subset("test") or ds.frames
    else:
        pool = generate_lj_dataset(1, 32, seed=rc.seed, periodic=False).frames
    if not 0 <= args.frame < len(pool):
        raise CLIError(f"--frame {args.frame} out of range (0..{len(pool) - 1})")
    system = pool[args.frame].system
    if rc.checkpoint is not None:
        pot = Potential.load(rc.checkpoint)
        if args.dtype:
            pot = pot.with_config(dtype=args.dtype)
        potential = model_potential(pot, args.force_mode)
        label = f"model ({args.force_mode or pot.cfg.force_mode} forces)"
    else:
        potential = lj_potential
        label = "exact LJ"
    masses = atomic_masses(system.species)
    rng = np.random.default_rng(rc.seed)
    state = MDState(system, maxwell_boltzmann(masses, args.temperature, rng), masses)
    try:
        traj, drift = run_md(state, potential, args.ensemble, args.steps, args.dt, args.stride,
                             args.temperature, args.friction, rc.seed)
    except MDBlowUp as exc:
        raise CLIError(f"md blew up: {exc}") from None
    with _Staging(rc.out) as d:
        if d is not None:
            traj.save(d)
    _say(f"md: {args.ensemble} {args.steps} steps of {args.dt} fs with {label}; "
         f"drift {drift:.4g} meV/atom/ps, final T {traj.temperature[-1]:.1f} K")
    return 0


def cmd_bench(args, rc: RunConfig) -> int:
    from . import evalbench as eb

    if args.sizes:
        try:
            sizes = [int(s) for s in args.sizes.split(",")]
        except ValueError:
            raise CLIError(f"--sizes must be integers, got {args.sizes!r}") from None
    else:
        sizes = eb.sqrt2_sizes()
    base = eb.benchmark_config()
    if rc.model:
        base = _model_config({**base.to_dict(), **rc.model})
    configs = {"nodeatt_" + ("on" if base.node_attention else "off"): base}
    if args.compare_nodeatt:
        configs["nodeatt_" + ("off" if base.node_attention else "on")] = replace(base, node_attention=not base.node_attention)
    try:
        curves = eb.throughput_benchmark(configs, sizes, args.repeats, args.warmups, args.fwd_bwd_max_atoms,
                                         rc.seed, log=lambda s: _say(f"bench: {s}"))
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    with _Staging(rc.out) as d:
        if d is not None:
            eb.write_scaling_csv(curves, d / "scaling.csv")
            (d / "fit.json").write_text(json.dumps({k: c.fit for k, c in curves.items()}, indent=2, sort_keys=True))
    for name, c in curves.items():
        f = c.fit
        if f.get("status") == "ok":
            _say(f"bench: {name} slopes {f['small_slope']:.2f} / {f['large_slope']:.2f}, "
                 f"crossover {f['crossover']:.0f} atoms, single-fit slope {f['single_slope']:.2f}")
        else:
            _say(f"bench: {name} single-fit slope {f['single_slope']:.2f} ({f.get('status')})")
    return 0


def cmd_ablate(args, rc: RunConfig) -> int:
    from .dataio import Dataset
    from .training import run_ablation_grid

    names = [s.strip() for s in args.grid.split(",") if s.strip()]
    bad = [n for n in names if n not in TOGGLE_KEYS]
    if bad:
        raise CLIError(f"unknown grid components {bad}; choose from {sorted(TOGGLE_KEYS)}")
    ds = Dataset.load(rc.dataset)
    cfg = _model_config(rc.model)
    tcfg = _train_config(rc.train, rc.seed)
    cfg = replace(cfg, force_mode=tcfg.force_mode)
    full = {k: True for k in TOGGLE_KEYS.values()}
    grid = [full] + [{**full, TOGGLE_KEYS[n]: False} for n in names]
    with _Staging(rc.out) as d:
        rows = run_ablation_grid(ds, cfg, tcfg, grid, rc.seed, None if d is None else d / "ablation.csv",
                                 log=lambda s: _say(f"ablate: {s}"))
    for r in rows:
        _say(f"ablate: {r['config']}: energy MAE {r['energy_mae_mev_per_atom']:.4f} meV/atom, "
             f"force MAE {r['force_mae_mev_per_a']:.4f} meV/A")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "md": cmd_md,
            "bench": cmd_bench, "ablate": cmd_ablate}


def dispatch(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        rc = _resolve(args)
        return COMMANDS[args.command](args, rc)
    except (CLIError, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 1


def apply_thread_env(argv: list[str]) -> None:
    """Pin BLAS threads from --threads / ATTNPOT_THREADS; effective only before numpy is imported."""
    threads = os.environ.get("ATTNPOT_THREADS")
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    if threads and threads.isdigit():
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = threads


def main() -> None:
    apply_thread_env(sys.argv[1:])
    sys.exit(dispatch(sys.argv[1:]))
