"""Velocity Verlet (NVE) and BAOAB Langevin (NVT) integrators with drift diagnostics.

Units: Å, fs, amu, eV, K.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .dataio import LabeledFrame, lennard_jones, write_extxyz
from .geometry import AtomicSystem

# eV / (Å amu) -> Å / fs^2
ACCEL = 9.6485332e-3
# amu Å^2 / fs^2 -> eV
KINETIC = 1.0 / ACCEL
KB = 8.617333262e-5  # eV / K
BLOWUP_SPEED = 100.0  # Å / fs

_MASSES = [
    0.0, 1.008, 4.0026, 6.94, 9.0122, 10.81, 12.011, 14.007, 15.999, 18.998, 20.180,
    22.990, 24.305, 26.982, 28.085, 30.974, 32.06, 35.45, 39.948, 39.098, 40.078,
    44.956, 47.867, 50.942, 51.996, 54.938, 55.845, 58.933, 58.693, 63.546, 65.38,
    69.723, 72.630, 74.922, 78.971, 79.904, 83.798, 85.468, 87.62, 88.906, 91.224,
    92.906, 95.95, 98.0, 101.07, 102.91, 106.42, 107.87, 112.41, 114.82, 118.71,
    121.76, 127.60, 126.90, 131.29,
]

Potential = Callable[[AtomicSystem], tuple[float, np.ndarray]]


class MDBlowUp(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


def atomic_masses(species) -> np.ndarray:
    """Standard atomic weights (amu); elements past Xe use a 2.5 amu per proton estimate."""
    z = np.asarray(species, dtype=np.int64)
    table = np.asarray(_MASSES)
    return np.where(z < len(table), table[np.minimum(z, len(table) - 1)], 2.5 * z)


@dataclass
class MDState:
    system: AtomicSystem
    velocities: np.ndarray
    masses: np.ndarray
    time: float = 0.0
    forces: np.ndarray | None = None
    potential_energy: float | None = None

    def __post_init__(self):
        n = len(self.system)
        self.velocities = np.asarray(self.velocities, dtype=np.float64).reshape(n, 3)
        self.masses = np.asarray(self.masses, dtype=np.float64).reshape(n)
        if np.any(self.masses <= 0):
            raise ValueError("masses must be positive")

    @property
    def kinetic_energy(self) -> float:
        return 0.5 * KINETIC * float(np.sum(self.masses[:, None] * self.velocities**2))

    @property
    def temperature(self) -> float:
        return 2.0 * self.kinetic_energy / (3 * len(self.masses) * KB)

    @property
    def momentum(self) -> np.ndarray:
        return (self.masses[:, None] * self.velocities).sum(axis=0)


def maxwell_boltzmann(masses, temperature: float, rng) -> np.ndarray:
    """Velocities at ``temperature`` with zero total momentum."""
    m = np.asarray(masses, dtype=np.float64)
    v = rng.normal(size=(len(m), 3)) * np.sqrt(KB * temperature * ACCEL / m)[:, None]
    v -= (m[:, None] * v).sum(axis=0) / m.sum()
    return v


def _evaluate(state: MDState, potential: Potential, step: int) -> MDState:
    e, f = potential(state.system)
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)) or not math.isfinite(e):
        raise MDBlowUp(step, "non-finite energy or forces")
    state.forces = f
    state.potential_energy = float(e)
    return state


def _moved(state: MDState, positions: np.ndarray, velocities: np.ndarray, dt: float) -> MDState:
    return MDState(state.system.copy(positions=positions), velocities, state.masses, state.time + dt)


def velocity_verlet_step(state: MDState, potential: Potential, dt: float, step: int = 0) -> MDState:
    """One velocity Verlet step; forces of the returned state are reused by the next call."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if state.forces is None:
        _evaluate(state, potential, step)
    inv_m = ACCEL / state.masses[:, None]
    v_half = state.velocities + 0.5 * dt * state.forces * inv_m
    new = _moved(state, state.system.positions + dt * v_half, v_half, dt)
    _evaluate(new, potential, step)
    new.velocities = v_half + 0.5 * dt * new.forces * inv_m
    return new


def langevin_step(state: MDState, potential: Potential, dt: float, temperature: float, friction: float,
                  rng) -> MDState:
    """BAOAB splitting: half kick, half drift, Ornstein-Uhlenbeck, half drift, half kick.

    ``friction`` is in 1/fs; ``rng`` is a numpy Generator or an integer seed.
    """
    if dt <= 0 or temperature < 0 or friction < 0:
        raise ValueError("dt must be positive; temperature and friction non-negative")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if state.forces is None:
        _evaluate(state, potential, 0)
    inv_m = ACCEL / state.masses[:, None]
    v = state.velocities + 0.5 * dt * state.forces * inv_m
    x = state.system.positions + 0.5 * dt * v
    c1 = math.exp(-friction * dt)
    c2 = math.sqrt(max(0.0, 1.0 - c1 * c1))
    sigma = np.sqrt(KB * temperature * ACCEL / state.masses)[:, None]
    v = c1 * v + c2 * sigma * rng.normal(size=v.shape)
    x = x + 0.5 * dt * v
    new = _moved(state, x, v, dt)
    _evaluate(new, potential, 0)
    new.velocities = v + 0.5 * dt * new.forces * inv_m
    return new


@dataclass
class Trajectory:
    times: list[float] = field(default_factory=list)
    potential: list[float] = field(default_factory=list)
    kinetic: list[float] = field(default_factory=list)
    temperature: list[float] = field(default_factory=list)
    frames: list[LabeledFrame] = field(default_factory=list)

    @property
    def total(self) -> np.ndarray:
        return np.asarray(self.potential) + np.asarray(self.kinetic)

    def energy_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_fs", "potential_ev", "kinetic_ev", "total_ev", "temperature_k"])
        for t, p, k, tt in zip(self.times, self.potential, self.kinetic, self.temperature):
            w.writerow([f"{t:.6f}", f"{p:.12g}", f"{k:.12g}", f"{p + k:.12g}", f"{tt:.8g}"])
        return buf.getvalue()

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "trajectory.extxyz").write_text(write_extxyz(self.frames))
        (d / "energies.csv").write_text(self.energy_csv())


def energy_drift(times_fs, total_ev, n_atoms: int) -> float:
    """|least-squares slope| of total energy, in meV / atom / ps."""
    t = np.asarray(times_fs, dtype=np.float64) / 1000.0
    e = np.asarray(total_ev, dtype=np.float64)
    if len(t) < 2:
        return 0.0
    slope = np.polyfit(t - t.mean(), e - e.mean(), 1)[0]
    return abs(float(slope)) * 1000.0 / n_atoms


def run_md(state: MDState, potential: Potential, ensemble: str = "nve", steps: int = 1000, dt: float = 0.5,
           stride: int = 10, temperature: float = 0.0, friction: float = 0.01, seed: int = 0,
           keep_frames: bool = True) -> tuple[Trajectory, float]:
    """Integrate ``steps`` steps and return the sampled trajectory and the NVE drift (meV/atom/ps).

    The neighbor graph is rebuilt by the potential at every force call.
    """
    if ensemble not in ("nve", "nvt"):
        raise ValueError(f"unknown ensemble {ensemble!r}")
    if stride < 1 or steps < 0:
        raise ValueError("stride must be >= 1 and steps >= 0")
    rng = np.random.default_rng(seed)
    traj = Trajectory()
    cur = replace(state)
    if cur.forces is None:
        _evaluate(cur, potential, 0)

    def sample(s: MDState):
        traj.times.append(s.time)
        traj.potential.append(s.potential_energy)
        traj.kinetic.append(s.kinetic_energy)
        traj.temperature.append(s.temperature)
        if keep_frames:
            traj.frames.append(LabeledFrame(s.system.copy(), s.potential_energy, s.forces.copy()))

    sample(cur)
    for step in range(1, steps + 1):
        if ensemble == "nve":
            cur = velocity_verlet_step(cur, potential, dt, step)
        else:
            cur = langevin_step(cur, potential, dt, temperature, friction, rng)
        speed = float(np.sqrt((cur.velocities**2).sum(axis=1)).max())
        if not math.isfinite(speed) or speed > BLOWUP_SPEED:
            raise MDBlowUp(step, f"atom speed {speed:.3g} Å/fs exceeds {BLOWUP_SPEED}")
        if step % stride == 0:
            sample(cur)
    drift = energy_drift(traj.times, traj.total, len(state.masses)) if ensemble == "nve" else float("nan")
    return traj, drift


# ----------------------------------------------------------- reference potentials

def lj_potential(system: AtomicSystem) -> tuple[float, np.ndarray]:
    e, f, _ = lennard_jones(system)
    return e, f


@dataclass
class HarmonicPotential:
    """E = 0.5 k |x - x0|^2 per atom (eV/Å^2)."""

    k: float
    center: np.ndarray

    def __call__(self, system: AtomicSystem) -> tuple[float, np.ndarray]:
        d = system.positions - self.center
        return 0.5 * self.k * float(np.sum(d * d)), -self.k * d


def model_potential(pot, mode: str | None = None) -> Potential:
    """Adapter from a trained model to the integrator interface."""
    def call(system: AtomicSystem):
        return pot.energy_and_forces(system, mode=mode)
    return call
