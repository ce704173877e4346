"""Verification battery: invariances, extensivity, stretch sweep, gradient and kNN
smoothness checks, and the throughput / complexity benchmark."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataio import LabeledFrame, relabel
from .geometry import AtomicSystem, build_neighbor_graph, replicate_supercell
from .model import ModelConfig, Potential, forward, make_batch
from .training import random_rotation


def load_thresholds(path=None) -> dict:
    if path is None:
        text = resources.files("attnpot").joinpath("thresholds.json").read_text()
    else:
        text = Path(path).read_text()
    data = json.loads(text)
    if "version" not in data:
        raise ValueError("thresholds file lacks a version")
    return data


@dataclass
class CheckReport:
    name: str
    inputs: str
    values: dict
    units: str
    threshold: float | None
    passed: bool
    runtime: float = 0.0
    hard: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def write_reports(reports: list[CheckReport], directory) -> int:
    """checks.json + checks.csv; returns the suite exit code (1 iff a hard check failed)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "checks.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True, default=float))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "value", "units", "threshold", "passed", "hard"])
    for r in reports:
        main = next(iter(r.values.values())) if r.values else ""
        w.writerow([r.name, f"{main:.6g}" if isinstance(main, float) else main, r.units, r.threshold, r.passed, r.hard])
    (d / "checks.csv").write_text(buf.getvalue())
    return suite_exit_code(reports)


def suite_exit_code(reports: list[CheckReport]) -> int:
    return int(any(r.hard and not r.passed for r in reports))


# ------------------------------------------------------------- invariances

def check_translation_permutation(pot: Potential, frames: list[AtomicSystem], n_trials: int = 100, seed: int = 0,
                                  threshold: float = 1e-8) -> CheckReport:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    base = pot.energies(frames)
    worst_t = worst_p = 0.0
    for trial in range(n_trials):
        i = trial % len(frames)
        s = frames[i]
        shift = rng.uniform(-10.0, 10.0, 3)
        e_t = pot.energy(s.copy(positions=s.positions + shift))
        perm = rng.permutation(len(s))
        e_p = pot.energy(s.copy(positions=s.positions[perm], species=s.species[perm]))
        worst_t = max(worst_t, abs(e_t - base[i]))
        worst_p = max(worst_p, abs(e_p - base[i]))
    worst = max(worst_t, worst_p)
    return CheckReport("translation_permutation", f"{len(frames)} frames, {n_trials} trials",
                       {"max_abs_delta_e": worst, "translation": worst_t, "permutation": worst_p}, "eV",
                       threshold, worst < threshold, time.perf_counter() - t0)


def check_rotation_invariance(pot: Potential, frames: list[AtomicSystem], n_trials: int = 100, seed: int = 0,
                              threshold: float = 1e-8) -> CheckReport:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    base = pot.energies(frames)
    worst = 0.0
    for trial in range(n_trials):
        i = trial % len(frames)
        s = frames[i]
        rot = random_rotation(rng)
        moved = s.copy(positions=s.positions @ rot.T, cell=None if s.cell is None else s.cell @ rot.T)
        worst = max(worst, abs(pot.energy(moved) - base[i]))
    return CheckReport("rotation_energy", f"{len(frames)} frames, {n_trials} rotations",
                       {"max_abs_delta_e": worst}, "eV", threshold, worst < threshold, time.perf_counter() - t0)


def check_rotation_cosine(pot: Potential, frames: list[AtomicSystem], n_rotations: int = 4, mode: str | None = None,
                          seed: int = 0, threshold: float | None = None, identity: bool = False) -> CheckReport:
    """Mean per-atom cosine between R F(x) and F(R x)."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    cos = []
    excluded = 0
    for s in frames:
        f1 = pot.predict(s, mode=mode, stress=False).forces
        for _ in range(n_rotations):
            rot = np.eye(3) if identity else random_rotation(rng)
            moved = s.copy(positions=s.positions @ rot.T, cell=None if s.cell is None else s.cell @ rot.T)
            f2 = pot.predict(moved, mode=mode, stress=False).forces
            a = f1 @ rot.T
            na = np.linalg.norm(a, axis=1)
            nb = np.linalg.norm(f2, axis=1)
            ok = (na > 1e-12) & (nb > 1e-12)
            excluded += int((~ok).sum())
            cos.extend(((a * f2).sum(axis=1)[ok] / (na[ok] * nb[ok])).tolist())
    mean = float(np.mean(cos)) if cos else float("nan")
    passed = True if threshold is None else mean > threshold
    return CheckReport("rotation_cosine", f"{len(frames)} frames x {n_rotations} rotations",
                       {"mean_cosine": mean, "atoms": len(cos), "excluded_zero_force": excluded}, "1",
                       threshold, passed, time.perf_counter() - t0, hard=threshold is not None)


def vacuum_pair(system: AtomicSystem, offset: float = 1000.0) -> AtomicSystem:
    """The system plus a copy translated by ``offset`` Å along x, both in open boundaries."""
    pos = np.concatenate([system.positions, system.positions + np.array([offset, 0.0, 0.0])])
    return AtomicSystem(pos, np.concatenate([system.species, system.species]),
                        total_charge=2 * system.total_charge, total_spin=2 * system.total_spin)


def check_extensivity(pot: Potential, system: AtomicSystem, mode: str = "vacuum_duplication",
                      offset: float = 1000.0, threshold: float | None = None) -> CheckReport:
    """E_delta = |E_2 - 2 E_1| in meV."""
    t0 = time.perf_counter()
    if mode == "vacuum_duplication":
        single = system.copy(cell=None, pbc=(False, False, False)) if system.periodic else system
        e1 = pot.energy(single)
        e2 = pot.energy(vacuum_pair(single, offset))
        inputs = f"{len(single)} atoms, offset {offset} Å"
    elif mode == "pbc_doubling":
        if not system.periodic:
            raise ValueError("pbc doubling needs a periodic frame")
        e1 = pot.energy(system)
        e2 = pot.energy(replicate_supercell(system, (2, 1, 1)))
        inputs = f"{len(system)} atoms, (2,1,1) supercell"
    else:
        raise ValueError(f"unknown extensivity mode {mode!r}")
    delta = 1000.0 * abs(e2 - 2.0 * e1)
    passed = True if threshold is None else delta < threshold
    return CheckReport(f"extensivity_{mode}", inputs, {"e_delta": delta, "e_single": e1, "e_double": e2},
                       "meV", threshold, passed, time.perf_counter() - t0, hard=threshold is not None)


def scale_about_centroid(system: AtomicSystem, factor: float) -> AtomicSystem:
    if factor <= 0:
        raise ValueError("stretch factor must be positive")
    c = system.positions.mean(axis=0)
    return system.copy(positions=c + factor * (system.positions - c))


def distance_scaling_sweep(pot: Potential, frames: list[LabeledFrame], factors, provenance: str) -> list[dict]:
    """Per-factor mean |E_model - E_oracle| / atom (meV) with all positions scaled about the centroid."""
    rows = []
    for f in factors:
        if f <= 0:
            raise ValueError("stretch factor must be positive")
        systems = [scale_about_centroid(fr.system, f) for fr in frames]
        ref = np.array([relabel(fr, s, provenance).energy for fr, s in zip(frames, systems)])
        pred = pot.energies(systems)
        n = np.array([len(s) for s in systems])
        rows.append({"factor": float(f), "energy_mae_mev_per_atom": float(np.mean(np.abs(pred - ref) / n) * 1000.0)})
    return rows


def check_force_consistency(pot: Potential, frames: list[AtomicSystem], eps: float = 1e-4,
                            threshold: float = 1e-5) -> CheckReport:
    """max |F_ad - F_fd|_inf / |F_fd|_inf over frames (conservative forces)."""
    t0 = time.perf_counter()
    worst = 0.0
    zero_frames = 0
    for s in frames:
        ad = pot.predict_conservative(s).forces
        fd = -dc.finite_difference_gradient(lambda x: pot.energy(s.copy(positions=x)), s.positions, eps)
        scale = np.abs(fd).max()
        if scale < 1e-14:
            zero_frames += 1
            rel = float(np.abs(ad).max())
        else:
            rel = float(np.abs(ad - fd).max() / scale)
        worst = max(worst, rel)
    return CheckReport("force_consistency", f"{len(frames)} frames, eps {eps} Å",
                       {"max_relative_deviation": worst, "zero_force_frames": zero_frames}, "1",
                       threshold, worst < threshold, time.perf_counter() - t0)


def rank_crossing_path(system: AtomicSystem, k: int, atom: int | None = None, n_points: int = 200,
                       margin: float = 0.4) -> tuple[list[AtomicSystem], int, np.ndarray]:
    """Slide the (k+1)-th neighbor of ``atom`` radially inward past the k-th one.

    With ``atom=None`` the atom with the tightest (k+1)-th neighbor is used, so
    the swap happens well inside the cutoff.  Returns the path systems, the
    moving atom and its unit direction of motion.
    """
    if len(system) < k + 2:
        raise ValueError("path needs at least k+2 atoms")
    if atom is None:
        full = np.linalg.norm(system.positions[:, None] - system.positions[None], axis=-1)
        np.fill_diagonal(full, np.inf)
        atom = int(np.argmin(np.sort(full, axis=1)[:, k]))
    d = system.positions - system.positions[atom]
    r = np.linalg.norm(d, axis=1)
    r[atom] = np.inf
    order = np.argsort(r)
    kth, mover = order[k - 1], order[k]
    unit = d[mover] / r[mover]
    start = r[mover] + margin
    stop = max(r[kth] - margin, 0.8)
    rho = np.linspace(start, stop, n_points)
    systems = []
    for p in rho:
        x = system.positions.copy()
        x[mover] = system.positions[atom] + p * unit
        systems.append(system.copy(positions=x))
    return systems, int(mover), -unit


def check_knn_smoothness(pot: Potential, path: list[AtomicSystem], mover: int, threshold: float = 1e-5,
                         fd_eps: float = 1e-4, fd_every: int = 10) -> CheckReport:
    """Energy continuity along a path crossing a kth/(k+1)th rank swap.

    The trapezoid residual |E_{t+1} - E_t + (F_t + F_{t+1})/2 . dx| is O(h^3)
    for a smooth surface and equals the jump for a discontinuous one.
    """
    t0 = time.perf_counter()
    preds = [pot.predict_conservative(s, allow_hard=True) for s in path]
    e = np.array([p.energy for p in preds])
    residual = []
    for t in range(len(path) - 1):
        dx = path[t + 1].positions[mover] - path[t].positions[mover]
        fmid = 0.5 * (preds[t].forces[mover] + preds[t + 1].forces[mover])
        residual.append(abs(e[t + 1] - e[t] + float(fmid @ dx)))
    residual = np.array(residual)
    second = np.abs(np.diff(e, 2))
    gap = 0.0
    if pot.cfg.knn_soft:
        for t in range(0, len(path), fd_every):
            s = path[t]
            x = s.positions.copy()
            fd = np.zeros(3)
            for a in range(3):
                xp = x.copy()
                xp[mover, a] += fd_eps
                xm = x.copy()
                xm[mover, a] -= fd_eps
                fd[a] = -(pot.energy(s.copy(positions=xp)) - pot.energy(s.copy(positions=xm))) / (2 * fd_eps)
            ad = preds[t].forces[mover]
            gap = max(gap, float(np.abs(ad - fd).max() / max(np.abs(fd).max(), 1e-12)))
    worst = float(residual.max())
    return CheckReport(
        "knn_smoothness" + ("" if pot.cfg.knn_soft else "_hard_control"),
        f"{len(path)} path points, k={pot.cfg.k}",
        {"max_trapezoid_residual": worst, "max_second_difference": float(second.max()),
         "energy_span": float(e.max() - e.min()), "max_force_gap": gap},
        "eV", threshold, worst < threshold, time.perf_counter() - t0,
        hard=pot.cfg.knn_soft,
    )


# ------------------------------------------------------------- throughput

class SectionTimer:
    def __init__(self):
        self.totals: dict[str, float] = {}

    @contextlib.contextmanager
    def section(self, name: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] = self.totals.get(name, 0.0) + time.perf_counter() - t


COMPONENTS = ("embedding", "neighbor_attention", "neighbor_ffn", "node_attention", "node_ffn", "merge", "head")


@dataclass
class ScalingCurve:
    name: str
    sizes: list[int]
    forward: list[float]
    with_graph: list[float]
    forward_backward: list[float]
    fractions: dict[str, list[float]] = field(default_factory=dict)
    fit: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for i, n in enumerate(self.sizes):
            row = {"config": self.name, "atoms": n, "forward_s": self.forward[i], "with_graph_s": self.with_graph[i],
                   "forward_backward_s": self.forward_backward[i]}
            for c, v in self.fractions.items():
                row[f"frac_{c}"] = v[i]
            out.append(row)
        return out


def benchmark_cluster(n_atoms: int, density: float = 0.018, seed: int = 0) -> AtomicSystem:
    """Jittered simple-cubic open cluster of ``n_atoms`` argon atoms."""
    rng = np.random.default_rng(seed)
    a = density ** (-1.0 / 3.0)
    m = int(math.ceil(n_atoms ** (1.0 / 3.0)))
    grid = np.array(np.meshgrid(*[np.arange(m)] * 3, indexing="ij")).reshape(3, -1).T.astype(np.float64)
    score = np.linalg.norm(grid - (m - 1) / 2.0, axis=1) + rng.uniform(0, 1e-3, len(grid))
    pick = np.argsort(score, kind="stable")[:n_atoms]
    pos = grid[pick] * a + rng.normal(0.0, 0.1, size=(n_atoms, 3))
    return AtomicSystem(pos, np.full(n_atoms, 18))


def fit_loglog(sizes, times) -> float:
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])


def fit_two_segment(sizes, times, min_points: int = 5, grid: int = 400) -> dict:
    """Continuous two-slope fit in log-log space; the break is placed to minimise squared error."""
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    if len(x) < 2 * min_points:
        return {"status": "insufficient points", "points": len(x)}
    lo, hi = x[min_points - 1], x[-min_points]
    best = None
    for c in np.linspace(lo, hi, grid):
        left = (x <= c).sum()
        right = (x >= c).sum()
        if left < min_points or right < min_points:
            continue
        a = np.stack([np.ones_like(x), np.minimum(x - c, 0.0), np.maximum(x - c, 0.0)], axis=1)
        coef, *_ = np.linalg.lstsq(a, y, rcond=None)
        sse = float(np.sum((a @ coef - y) ** 2))
        if best is None or sse < best[0]:
            best = (sse, c, coef, int(left), int(right))
    if best is None:
        return {"status": "insufficient points", "points": len(x)}
    sse, c, coef, left, right = best
    return {"status": "ok", "small_slope": float(coef[1]), "large_slope": float(coef[2]),
            "crossover": float(np.exp(c)), "sse": sse, "points_small": left, "points_large": right}


def _median(xs):
    return float(np.median(np.asarray(xs)))


def throughput_benchmark(configs: dict[str, ModelConfig], sizes, repeats: int = 7, warmups: int = 2,
                         fwd_bwd_max_atoms: int = 2048, seed: int = 0, log=None) -> dict[str, ScalingCurve]:
    """Median wall time per forward at each size (graph construction timed separately).

    Sizes must span at least 1.5 decades.  Component fractions come from the
    per-section timers of the forward pass.
    """
    sizes = [int(n) for n in sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    if math.log10(sizes[-1] / sizes[0]) < 1.5:
        raise ValueError("sizes must span at least 1.5 decades")
    curves = {}
    for name, cfg in configs.items():
        pot = Potential(cfg, seed=seed)
        dt = cfg.np_dtype
        p = pot.params.tensors()
        fw, wg, fb = [], [], []
        fracs = {c: [] for c in COMPONENTS}
        for n in sizes:
            system = benchmark_cluster(n, seed=seed)
            t_fw, t_graph, comp = [], [], {c: [] for c in COMPONENTS}
            for rep in range(warmups + repeats):
                tg = time.perf_counter()
                graph = build_neighbor_graph(system, cfg.k, cfg.r_cut, cfg.knn, with_geometry=False)
                tg = time.perf_counter() - tg
                batch = make_batch([system], cfg, [graph])
                x = dc.Tensor(batch.positions.astype(dt))
                timer = SectionTimer()
                t = time.perf_counter()
                with dc.no_grad():
                    forward(p, batch, cfg, x, None, timer=timer)
                t = time.perf_counter() - t
                if rep >= warmups:
                    t_fw.append(t)
                    t_graph.append(t + tg)
                    for c in COMPONENTS:
                        comp[c].append(timer.totals.get(c, 0.0))
            fw.append(_median(t_fw))
            wg.append(_median(t_graph))
            tot = sum(_median(comp[c]) for c in COMPONENTS)
            for c in COMPONENTS:
                fracs[c].append(_median(comp[c]) / tot if tot > 0 else 0.0)
            if n <= fwd_bwd_max_atoms:
                t_fb = []
                for rep in range(warmups + repeats):
                    graph = build_neighbor_graph(system, cfg.k, cfg.r_cut, cfg.knn, with_geometry=False)
                    batch = make_batch([system], cfg, [graph])
                    t = time.perf_counter()
                    with dc.Tape() as tape:
                        x = tape.watch(dc.Tensor(batch.positions.astype(dt)))
                        out = forward(p, batch, cfg, x, None)
                        tape.backward(dc.sum_(out["energy"]))
                    if rep >= warmups:
                        t_fb.append(time.perf_counter() - t)
                fb.append(_median(t_fb))
            else:
                fb.append(float("nan"))
            if log:
                log(f"{name} N={n}: forward {fw[-1]:.4f} s, node attention {fracs['node_attention'][-1]:.3f}")
        curve = ScalingCurve(name, sizes, fw, wg, fb, fracs)
        curve.fit = {"single_slope": fit_loglog(sizes, fw)}
        curve.fit.update(fit_two_segment(sizes, fw))
        curves[name] = curve
    return curves


def write_scaling_csv(curves: dict[str, ScalingCurve], path) -> None:
    rows = [r for c in curves.values() for r in c.rows()]
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([f"{r[k]:.6g}" if isinstance(r[k], float) else r[k] for k in keys])
    Path(path).write_text(buf.getvalue())


def sqrt2_sizes(lo: int = 64, hi: int = 16384) -> list[int]:
    """Sizes spaced by a factor of sqrt(2) from lo to hi inclusive."""
    n = int(round(2 * math.log2(hi / lo)))
    return [int(round(lo * 2 ** (i / 2))) for i in range(n + 1)]


def benchmark_config(node_attention: bool = True) -> ModelConfig:
    """Single-layer fp32 model sized so both cost regimes fit in 64..16384 atoms on one CPU core."""
    return ModelConfig(hidden_size=32, num_layers=1, num_heads=4, k=12, lae=False, erope=True, num_freq=8,
                       rbf_size=16, ffn_multiplier=1, output_hidden_layers=1, dtype="fp32", direct_head=False,
                       node_attention=node_attention, node_chunk_elements=1 << 24)
