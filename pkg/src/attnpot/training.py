"""Losses, AdamW with warmup + cosine schedule, the training loop and ablation driver."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataio import Dataset, LabeledFrame
from .diffcore import Tensor
from .geometry import AtomicSystem, build_neighbor_graph
from .model import ModelConfig, Potential, forward, make_batch


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    epochs: int = 10
    lr: float = 2e-4
    final_lr: float = 1e-6
    warmup_fraction: float = 0.05
    weight_decay: float = 1e-3
    grad_clip: float = 10.0
    lambda_e: float = 4.0
    lambda_f: float = 100.0
    force_mode: str = "direct"
    seed: int = 0
    rotation_augment: bool = True
    auto_scale: bool = True
    fd_step: float = 1e-4
    divergence_threshold: float = 1e6
    eval_batch_size: int = 8

    def __post_init__(self):
        if self.lambda_e < 0 or self.lambda_f < 0 or (self.lambda_e == 0 and self.lambda_f == 0):
            raise ValueError("loss weights must be non-negative and not both zero")
        if self.force_mode not in ("direct", "conservative"):
            raise ValueError(f"unknown force_mode {self.force_mode!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossReport:
    energy_mae: float      # meV / atom
    force_mae: float       # meV / Å
    loss: float
    step: int = 0
    epoch: int = 0
    split: str = "train"

    def row(self) -> dict:
        return {"epoch": self.epoch, "step": self.step, "split": self.split,
                "loss": f"{self.loss:.10g}", "energy_mae_mev_per_atom": f"{self.energy_mae:.10g}",
                "force_mae_mev_per_a": f"{self.force_mae:.10g}"}


# ----------------------------------------------------------------- loss

def compute_loss(pred_energy, pred_forces, frames: list[LabeledFrame], lambda_e: float = 4.0,
                 lambda_f: float = 100.0):
    """loss = lambda_e * mean_b |dE_b| / N_b + lambda_f * mean over force components |dF|.

    ``pred_energy`` is (B,) and ``pred_forces`` (sum N_b, 3), numpy or Tensor.
    Returns (loss Tensor, LossReport) with MAEs in meV/atom and meV/Å.
    """
    ref_e = np.array([f.energy for f in frames])
    counts = np.array([len(f.system) for f in frames], dtype=np.float64)
    if not np.all(np.isfinite(ref_e)):
        raise ValueError("non-finite reference energies")
    pe = pred_energy if isinstance(pred_energy, Tensor) else Tensor(np.asarray(pred_energy, dtype=np.float64))
    de = dc.sub(pe, ref_e.astype(pe.dtype))
    e_term = dc.mean(dc.div(dc.abs_(de), counts.astype(pe.dtype)))
    loss = dc.mul(e_term, lambda_e)
    f_mae = float("nan")
    have_f = pred_forces is not None and all(f.forces is not None for f in frames)
    if have_f:
        ref_f = np.concatenate([f.forces for f in frames])
        if not np.all(np.isfinite(ref_f)):
            raise ValueError("non-finite reference forces")
        pf = pred_forces if isinstance(pred_forces, Tensor) else Tensor(np.asarray(pred_forces, dtype=np.float64))
        f_term = dc.mean(dc.abs_(dc.sub(pf, ref_f.astype(pf.dtype))))
        f_mae = 1000.0 * float(f_term.data)
        if lambda_f:
            loss = dc.add(loss, dc.mul(f_term, lambda_f))
    report = LossReport(1000.0 * float(e_term.data), f_mae, float(loss.data))
    return loss, report


# ------------------------------------------------------------ optimizer

class AdamW:
    """Adam with decoupled weight decay (matrices only) and global-norm clipping."""

    def __init__(self, store: dc.ParameterStore, weight_decay: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip: float = 10.0, frozen: set | None = None):
        self.store = store
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.frozen = frozen or set()
        self.m = {k: np.zeros_like(v) for k, v in store.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.arrays.items()}
        self.t = 0

    def step(self, lr: float) -> float:
        names = [k for k in self.store.names() if k not in self.frozen]
        gnorm = math.sqrt(sum(float(np.sum(self.store.grads[k] ** 2)) for k in names))
        scale = self.clip / gnorm if self.clip and gnorm > self.clip else 1.0
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in names:
            p = self.store.arrays[k]
            g = self.store.grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if self.wd and p.ndim >= 2:
                p -= lr * self.wd * p
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return gnorm


def learning_rate(step: int, total: int, base: float, final: float, warmup_fraction: float) -> float:
    warm = max(1, int(math.ceil(warmup_fraction * total)))
    if step < warm:
        return base * (step + 1) / warm
    span = max(1, total - warm)
    frac = min(1.0, (step - warm) / span)
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * frac))


# ------------------------------------------------------------ helpers

def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])


def rotate_frame(frame: LabeledFrame, rot: np.ndarray) -> LabeledFrame:
    s = frame.system
    system = s.copy(positions=s.positions @ rot.T, cell=None if s.cell is None else s.cell @ rot.T)
    forces = None if frame.forces is None else frame.forces @ rot.T
    stress = None if frame.stress is None else rot @ frame.stress @ rot.T
    return LabeledFrame(system, frame.energy, forces, stress)


def fit_energy_statistics(frames: list[LabeledFrame], max_elements: int) -> tuple[np.ndarray, float, float]:
    """Per-species reference energies (least squares), per-atom residual spread and force RMS."""
    species = sorted({int(z) for f in frames for z in f.system.species})
    counts = np.array([[np.sum(f.system.species == z) for z in species] for f in frames], dtype=np.float64)
    e = np.array([f.energy for f in frames])
    coef, *_ = np.linalg.lstsq(counts, e, rcond=None)
    ref = np.zeros(max_elements + 1)
    ref[species] = coef
    n = counts.sum(axis=1)
    resid = (e - counts @ coef) / n
    e_scale = float(max(np.std(resid), 1e-3))
    f_all = [f.forces for f in frames if f.forces is not None]
    f_scale = float(max(np.sqrt(np.mean(np.concatenate(f_all) ** 2)), 1e-3)) if f_all else 1.0
    return ref, e_scale, f_scale


class _GraphCache:
    """Neighbor topology per frame; rigid rotations keep it valid, so it is built once."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.graphs: dict[int, object] = {}

    def get(self, key: int, system: AtomicSystem):
        g = self.graphs.get(key)
        if g is None:
            g = build_neighbor_graph(system, self.cfg.k, self.cfg.r_cut, self.cfg.knn, with_geometry=False)
            self.graphs[key] = g
        return g


def _batch_gradients(pot: Potential, frames, graphs, tcfg: TrainConfig, mode: str):
    """Loss report and parameter gradients (accumulated into pot.params.grads) for one batch."""
    cfg = pot.cfg
    dt = cfg.np_dtype
    batch = make_batch([f.system for f in frames], cfg, graphs)
    cells = Tensor(batch.cells.astype(dt))
    store = pot.params
    if mode == "direct":
        with dc.Tape() as tape:
            p = store.tensors(tape)
            out = forward(p, batch, cfg, Tensor(batch.positions.astype(dt)), cells, direct=True)
            loss, rep = compute_loss(out["energy"], out["forces"], frames, tcfg.lambda_e, tcfg.lambda_f)
            tape.backward(loss)
        store.collect(p)
        return rep
    # gradient forces: F = -dE/dx; the parameter gradient of the force loss is
    # -d/dtheta (grad_x E . s) with s the sign pattern of the force error, taken
    # as a central difference of parameter gradients at x +/- h s
    with dc.Tape() as tape:
        p = store.tensors()
        x = tape.watch(Tensor(batch.positions.astype(dt)))
        out = forward(p, batch, cfg, x, cells)
        tape.backward(dc.sum_(out["energy"]))
    forces = -x.grad
    _, rep = compute_loss(out["energy"].data, forces, frames, tcfg.lambda_e, tcfg.lambda_f)
    ref_f = np.concatenate([f.forces for f in frames])
    ref_e = np.array([f.energy for f in frames])
    counts = np.array([len(f.system) for f in frames], dtype=np.float64)
    a = tcfg.lambda_e * np.sign(out["energy"].data - ref_e) / counts / len(frames)
    s = np.sign(forces - ref_f)
    c = tcfg.lambda_f / forces.size
    h = tcfg.fd_step
    for sgn in (1.0, -1.0):
        with dc.Tape() as tape:
            p = store.tensors(tape)
            out = forward(p, batch, cfg, Tensor((batch.positions + sgn * h * s).astype(dt)), cells)
            seed = 0.5 * a - sgn * c / (2.0 * h)
            tape.backward(out["energy"], seed=seed.astype(dt))
        store.collect(p)
    return rep


def evaluate(pot: Potential, frames: list[LabeledFrame], mode: str | None = None, batch_size: int = 8,
             lambda_e: float = 4.0, lambda_f: float = 100.0, graphs=None) -> LossReport:
    """Energy/force MAEs of ``pot`` on ``frames`` (meV/atom, meV/Å)."""
    mode = mode or pot.cfg.force_mode
    cfg = pot.cfg
    dt = cfg.np_dtype
    e_pred, f_pred = [], []
    for b0 in range(0, len(frames), batch_size):
        chunk = frames[b0 : b0 + batch_size]
        gs = None if graphs is None else graphs[b0 : b0 + batch_size]
        batch = make_batch([f.system for f in chunk], cfg, gs)
        cells = Tensor(batch.cells.astype(dt))
        if mode == "direct":
            with dc.no_grad():
                out = forward(pot.params.tensors(), batch, cfg, Tensor(batch.positions.astype(dt)), cells, direct=True)
            e_pred.append(out["energy"].data)
            f_pred.append(out["forces"].data)
        else:
            with dc.Tape() as tape:
                x = tape.watch(Tensor(batch.positions.astype(dt)))
                out = forward(pot.params.tensors(), batch, cfg, x, cells)
                tape.backward(dc.sum_(out["energy"]))
            e_pred.append(out["energy"].data)
            f_pred.append(-x.grad)
    e = np.concatenate(e_pred).astype(np.float64)
    f = np.concatenate(f_pred).astype(np.float64)
    _, rep = compute_loss(e, f, frames, lambda_e, lambda_f)
    return rep


def _write_metrics(path: Path, reports: list[LossReport]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(reports[0].row()) if reports else ["epoch"], lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    path.write_text(buf.getvalue())


def train(pot: Potential, dataset: Dataset, tcfg: TrainConfig, out_dir=None, frozen: set | None = None,
          log=None) -> tuple[Potential, list[LossReport]]:
    """Train in place and return the best-validation model plus per-epoch reports.

    Reports alternate train/val per epoch (val only if a val split exists).
    """
    train_frames = dataset.subset("train")
    val_frames = dataset.subset("val")
    if not train_frames:
        raise ValueError("dataset has no training frames")
    mode = tcfg.force_mode
    if mode == "conservative" and not pot.cfg.knn_soft:
        raise ValueError("gradient-force training needs the soft kNN graph")
    if tcfg.auto_scale:
        ref, e_scale, f_scale = fit_energy_statistics(train_frames, pot.cfg.max_num_elements)
        pot.cfg = replace(pot.cfg, energy_scale=e_scale, force_scale=f_scale)
        pot.params.arrays["head.reference"][...] = ref.astype(pot.cfg.np_dtype)
    rng = np.random.default_rng(tcfg.seed)
    cache = _GraphCache(pot.cfg)
    train_graphs = [cache.get(i, f.system) for i, f in enumerate(train_frames)]
    val_graphs = [build_neighbor_graph(f.system, pot.cfg.k, pot.cfg.r_cut, pot.cfg.knn, with_geometry=False) for f in val_frames]
    n_batches = int(math.ceil(len(train_frames) / tcfg.batch_size))
    total = max(1, n_batches * tcfg.epochs)
    opt = AdamW(pot.params, tcfg.weight_decay, clip=tcfg.grad_clip, frozen=frozen)
    history: list[LossReport] = []
    best = (math.inf, pot.params.copy(), -1)
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(train_frames))
        acc = []
        for b in range(n_batches):
            idx = order[b * tcfg.batch_size : (b + 1) * tcfg.batch_size]
            frames = [train_frames[i] for i in idx]
            if tcfg.rotation_augment:
                frames = [rotate_frame(f, random_rotation(rng)) for f in frames]
            pot.params.zero_grad()
            rep = _batch_gradients(pot, frames, [train_graphs[i] for i in idx], tcfg, mode)
            if not math.isfinite(rep.loss) or rep.loss > tcfg.divergence_threshold:
                raise TrainingDivergence(f"loss {rep.loss:.4g} at epoch {epoch} step {step}; "
                                         f"lr {learning_rate(step, total, tcfg.lr, tcfg.final_lr, tcfg.warmup_fraction):.3g}")
            opt.step(learning_rate(step, total, tcfg.lr, tcfg.final_lr, tcfg.warmup_fraction))
            step += 1
            acc.append((rep, len(frames)))
        w = np.array([n for _, n in acc], dtype=np.float64)
        tr = LossReport(
            float(np.average([r.energy_mae for r, _ in acc], weights=w)),
            float(np.average([r.force_mae for r, _ in acc], weights=w)),
            float(np.average([r.loss for r, _ in acc], weights=w)), step, epoch, "train",
        )
        history.append(tr)
        score = tr.loss
        if val_frames:
            vr = evaluate(pot, val_frames, mode, tcfg.eval_batch_size, tcfg.lambda_e, tcfg.lambda_f, val_graphs)
            vr.step, vr.epoch, vr.split = step, epoch, "val"
            history.append(vr)
            score = vr.loss
        if score < best[0]:
            best = (score, pot.params.copy(), epoch)
        if log:
            log(f"epoch {epoch}: " + ", ".join(f"{r.split} E {r.energy_mae:.3f} meV/atom F {r.force_mae:.2f} meV/A"
                                               for r in history[-2 if val_frames else -1:]))
    if tcfg.epochs:
        pot.params = best[1]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pot.save(out / "best", extra={"train_config": tcfg.to_dict(), "best_epoch": best[2]})
        _write_metrics(out / "metrics.csv", history)
    return pot, history


def conservative_finetune(pot: Potential, dataset: Dataset, tcfg: TrainConfig, out_dir=None,
                          log=None) -> tuple[Potential, list[LossReport]]:
    """Continue training with gradient forces; the direct head is frozen and optimizer state reset."""
    cfg = replace(pot.cfg, force_mode="conservative")
    tuned = Potential(cfg, pot.params.copy())
    frozen = {k for k in tuned.params.names() if k.startswith("force.")}
    tcfg = replace(tcfg, force_mode="conservative", auto_scale=False)
    return train(tuned, dataset, tcfg, out_dir=out_dir, frozen=frozen, log=log)


TOGGLE_NAMES = ("lae", "node_attention", "erope")


def toggle_label(toggles: dict) -> str:
    on = [n for n in TOGGLE_NAMES if toggles.get(n)]
    return "+".join(["neighbor"] + on)


def run_ablation_grid(dataset: Dataset, model_cfg: ModelConfig, tcfg: TrainConfig, grid: list[dict],
                      seed: int = 0, out_csv=None, log=None) -> list[dict]:
    """Train every toggle set under the same seed and budget; one table row per set."""
    rows = []
    for toggles in grid:
        bad = set(toggles) - set(TOGGLE_NAMES)
        if bad:
            raise ValueError(f"unknown toggles {sorted(bad)} (neighbor attention is always on)")
        cfg = replace(model_cfg, **{k: bool(v) for k, v in toggles.items()})
        pot = Potential(cfg, seed=seed)
        t0 = time.perf_counter()
        pot, hist = train(pot, dataset, replace(tcfg, seed=seed), log=log)
        elapsed = time.perf_counter() - t0
        split = "val" if dataset.subset("val") else "train"
        frames = dataset.subset(split)
        rep = evaluate(pot, frames, tcfg.force_mode, tcfg.eval_batch_size, tcfg.lambda_e, tcfg.lambda_f)
        rows.append({
            "config": toggle_label(toggles),
            "NeiAtt": "on",
            "LAE": "on" if cfg.lae else "off",
            "NodeAtt": "on" if cfg.node_attention else "off",
            "ERoPE": "on" if cfg.erope else "off",
            "energy_mae_mev_per_atom": rep.energy_mae,
            "force_mae_mev_per_a": rep.force_mae,
            "parameters": pot.params.num_values(),
            "split": split,
            "train_seconds": elapsed,
        })
    if out_csv is not None:
        write_table(out_csv, rows, exclude=("train_seconds",))
    return rows


def write_table(path, rows: list[dict], exclude=()) -> None:
    if not rows:
        Path(path).write_text("")
        return
    keys = [k for k in rows[0] if k not in exclude]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([f"{r[k]:.10g}" if isinstance(r[k], float) else r[k] for k in keys])
    Path(path).write_text(buf.getvalue())
