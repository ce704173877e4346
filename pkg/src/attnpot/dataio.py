"""Extended-XYZ I/O, synthetic labeled datasets (Lennard-Jones, Yukawa) and splits."""

from __future__ import annotations

import io
import itertools
import math
import shlex
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import AtomicSystem

SYMBOLS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn Ga Ge As Se Br Kr "
    "Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb "
    "Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf "
    "Db Sg Bh Hs Mt Ds"
).split()
NUMBERS = {s: z for z, s in enumerate(SYMBOLS)}

LJ_EPSILON = 0.0103   # eV
LJ_SIGMA = 3.4        # Å
LJ_CUTOFF = 10.0      # Å
COULOMB_EV_A = 14.4   # eV Å per e^2
MIN_SEPARATION = 0.5  # Å

SPLITS = ("train", "val", "test")


class ExtXYZError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class LabeledFrame:
    system: AtomicSystem
    energy: float
    forces: np.ndarray | None = None
    stress: np.ndarray | None = None

    def __post_init__(self):
        self.energy = float(self.energy)
        if not math.isfinite(self.energy):
            raise ValueError("reference energy must be finite")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)
            if self.forces.shape != (len(self.system), 3):
                raise ValueError(f"forces shape {self.forces.shape} does not match {len(self.system)} atoms")
        if self.stress is not None:
            self.stress = np.asarray(self.stress, dtype=np.float64).reshape(3, 3)

    @property
    def has_forces(self) -> bool:
        return self.forces is not None


@dataclass
class Dataset:
    frames: list[LabeledFrame]
    splits: list[str] = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        if not self.splits:
            self.splits = ["train"] * len(self.frames)
        if len(self.splits) != len(self.frames):
            raise ValueError("one split tag per frame required")
        bad = set(self.splits) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.frames)

    def subset(self, split: str) -> list[LabeledFrame]:
        return [f for f, s in zip(self.frames, self.splits) if s == split]

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def manifest(self) -> dict:
        counts = {s: self.splits.count(s) for s in SPLITS}
        return {"provenance": self.provenance, "frames": len(self.frames), **counts}

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for s in SPLITS:
            frames = self.subset(s)
            (d / f"{s}.extxyz").write_text(write_extxyz(frames))
        write_manifest(d / "manifest.txt", self.manifest())

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        if not d.is_dir():
            raise FileNotFoundError(f"dataset directory {d} not found")
        frames, splits = [], []
        for s in SPLITS:
            p = d / f"{s}.extxyz"
            if p.exists():
                got = parse_extxyz(p.read_text())
                frames += got
                splits += [s] * len(got)
        if not frames:
            raise ValueError(f"no frames found in {d}")
        prov = read_manifest(d / "manifest.txt").get("provenance", "") if (d / "manifest.txt").exists() else ""
        return cls(frames, splits, prov)


def write_manifest(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()))


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# --------------------------------------------------------------- extxyz

def _fmt(x: float) -> str:
    return f"{x:.12g}" if x != 0 else "0"


def write_extxyz(frames) -> str:
    buf = io.StringIO()
    for fr in frames:
        s = fr.system
        n = len(s)
        props = "species:S:1:pos:R:3" + (":forces:R:3" if fr.forces is not None else "")
        head = []
        if s.cell is not None:
            head.append('Lattice="' + " ".join(_fmt(v) for v in s.cell.reshape(-1)) + '"')
        head.append(f"Properties={props}")
        head.append(f"energy={_fmt(fr.energy)}")
        if fr.stress is not None:
            head.append('stress="' + " ".join(_fmt(v) for v in fr.stress.reshape(-1)) + '"')
        if s.total_charge:
            head.append(f"charge={s.total_charge}")
        if s.total_spin:
            head.append(f"spin={s.total_spin}")
        head.append('pbc="' + " ".join("T" if p else "F" for p in s.pbc) + '"')
        buf.write(f"{n}\n{' '.join(head)}\n")
        for i in range(n):
            cols = [SYMBOLS[s.species[i]]] + [_fmt(v) for v in s.positions[i]]
            if fr.forces is not None:
                cols += [_fmt(v) for v in fr.forces[i]]
            buf.write(" ".join(cols) + "\n")
    return buf.getvalue()


def _parse_header(line: str, lineno: int) -> dict:
    try:
        tokens = shlex.split(line)
    except ValueError as exc:
        raise ExtXYZError(lineno, f"unbalanced quotes in comment line ({exc})") from None
    out = {}
    for tok in tokens:
        if "=" not in tok:
            continue
        k, v = tok.split("=", 1)
        out[k.strip().lower()] = v.strip()
    return out


def _parse_properties(spec: str, lineno: int) -> list[tuple[str, str, int]]:
    parts = spec.split(":")
    if len(parts) % 3:
        raise ExtXYZError(lineno, f"malformed Properties specification {spec!r}")
    props = []
    for i in range(0, len(parts), 3):
        name, kind, count = parts[i], parts[i + 1], parts[i + 2]
        if kind not in ("S", "R", "I", "L") or not count.isdigit():
            raise ExtXYZError(lineno, f"malformed Properties entry {name}:{kind}:{count}")
        props.append((name.lower(), kind, int(count)))
    return props


def parse_extxyz(text) -> list[LabeledFrame]:
    if hasattr(text, "read"):
        text = text.read()
    lines = text.splitlines()
    frames = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n = int(lines[i].strip())
        except ValueError:
            raise ExtXYZError(i + 1, f"expected an atom count, got {lines[i]!r}") from None
        if n < 1:
            raise ExtXYZError(i + 1, "atom count must be positive")
        if i + 1 >= len(lines):
            raise ExtXYZError(i + 2, "missing comment line")
        header = _parse_header(lines[i + 1], i + 2)
        props = _parse_properties(header.get("properties", "species:S:1:pos:R:3"), i + 2)
        names = [p[0] for p in props]
        if "pos" not in names or "species" not in names:
            raise ExtXYZError(i + 2, "Properties must include species and pos")
        cell = None
        if "lattice" in header:
            try:
                vals = [float(v) for v in header["lattice"].split()]
            except ValueError:
                raise ExtXYZError(i + 2, "non-numeric Lattice entry") from None
            if len(vals) != 9:
                raise ExtXYZError(i + 2, f"Lattice needs 9 numbers, got {len(vals)}")
            cell = np.array(vals).reshape(3, 3)
        if "pbc" in header:
            pbc = tuple(v.upper() in ("T", "TRUE", "1") for v in header["pbc"].split())
            if len(pbc) != 3:
                raise ExtXYZError(i + 2, "pbc needs three flags")
        else:
            pbc = (cell is not None,) * 3
        cols_needed = sum(p[2] for p in props)
        data = {p[0]: [] for p in props}
        for a in range(n):
            ln = i + 2 + a
            if ln >= len(lines):
                raise ExtXYZError(ln + 1, f"expected {n} atom rows")
            row = lines[ln].split()
            if len(row) != cols_needed:
                raise ExtXYZError(ln + 1, f"expected {cols_needed} columns, got {len(row)}")
            c = 0
            for name, kind, count in props:
                vals = row[c : c + count]
                c += count
                if kind == "R":
                    try:
                        data[name].append([float(v) for v in vals])
                    except ValueError:
                        raise ExtXYZError(ln + 1, f"non-numeric value in {name}") from None
                else:
                    data[name].append(vals)
        species = []
        for a, (sym,) in enumerate(data["species"]):
            if sym in NUMBERS and sym != "X":
                species.append(NUMBERS[sym])
            elif sym.isdigit():
                species.append(int(sym))
            else:
                raise ExtXYZError(i + 3 + a, f"unknown element {sym!r}")
        system = AtomicSystem(
            np.array(data["pos"]), np.array(species), cell, pbc,
            int(header.get("charge", 0)), int(header.get("spin", 0)),
        )
        try:
            energy = float(header["energy"]) if "energy" in header else float("nan")
        except ValueError:
            raise ExtXYZError(i + 2, "non-numeric energy") from None
        forces = np.array(data["forces"]) if "forces" in data else None
        stress = None
        if "stress" in header:
            stress = np.array([float(v) for v in header["stress"].split()]).reshape(3, 3)
        if not math.isfinite(energy):
            raise ExtXYZError(i + 2, "frame has no finite energy")
        frames.append(LabeledFrame(system, energy, forces, stress))
        i += 2 + n
    return frames


# ------------------------------------------------------------ oracle potentials

def _image_shifts(system: AtomicSystem, r_cut: float) -> np.ndarray:
    if not system.periodic:
        return np.zeros((1, 3))
    inv = np.linalg.inv(system.cell)
    h = 1.0 / np.linalg.norm(inv, axis=0)
    reps = [int(math.ceil(r_cut / h[a])) if system.pbc[a] else 0 for a in range(3)]
    return np.array(list(itertools.product(*[range(-m, m + 1) for m in reps])), dtype=np.float64)


def lennard_jones(system: AtomicSystem, epsilon: float = LJ_EPSILON, sigma: float = LJ_SIGMA,
                  cutoff: float = LJ_CUTOFF) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Energy-shifted LJ energy, forces and (periodic only) stress = (1/V) dE/d(strain)."""
    x = system.positions
    n = len(x)
    e_shift = 4 * epsilon * ((sigma / cutoff) ** 12 - (sigma / cutoff) ** 6)
    energy = 0.0
    forces = np.zeros((n, 3))
    virial = np.zeros((3, 3))
    for s in _image_shifts(system, cutoff):
        off = s @ system.cell if system.periodic else np.zeros(3)
        d = x[None, :, :] + off - x[:, None, :]             # d[i, j] = x_j + off - x_i
        r2 = np.einsum("ijk,ijk->ij", d, d)
        if not s.any():
            np.fill_diagonal(r2, np.inf)
        ok = r2 < cutoff * cutoff
        if not ok.any():
            continue
        r2s = np.where(ok, r2, 1.0)
        sr6 = (sigma * sigma / r2s) ** 3
        pair_e = np.where(ok, 4 * epsilon * (sr6 * sr6 - sr6) - e_shift, 0.0)
        # dE/dr / r
        de = np.where(ok, 4 * epsilon * (-12 * sr6 * sr6 + 6 * sr6) / r2s, 0.0)
        energy += 0.5 * pair_e.sum()
        fij = de[..., None] * d                              # force on i from j
        forces += fij.sum(axis=1)
        virial += 0.5 * np.einsum("ij,ijk,ijl->kl", de, d, d)
    stress = virial / system.volume if system.periodic else None
    return float(energy), forces, stress


def lennard_jones_reference(system: AtomicSystem, epsilon: float = LJ_EPSILON, sigma: float = LJ_SIGMA,
                            cutoff: float = LJ_CUTOFF) -> tuple[float, np.ndarray]:
    """Plain double-loop LJ used to cross-check :func:`lennard_jones`."""
    x = system.positions
    n = len(x)
    e_shift = 4 * epsilon * ((sigma / cutoff) ** 12 - (sigma / cutoff) ** 6)
    shifts = _image_shifts(system, cutoff)
    energy = 0.0
    forces = np.zeros((n, 3))
    for i in range(n):
        for j in range(n):
            for s in shifts:
                if i == j and not s.any():
                    continue
                off = s @ system.cell if system.periodic else np.zeros(3)
                d = x[j] + off - x[i]
                r = math.sqrt(float(d @ d))
                if r >= cutoff:
                    continue
                sr = sigma / r
                energy += 0.5 * (4 * epsilon * (sr**12 - sr**6) - e_shift)
                dEdr = 4 * epsilon * (-12 * sr**12 + 6 * sr**6) / r
                forces[i] += dEdr * d / r
    return energy, forces


def yukawa(system: AtomicSystem, charges: np.ndarray, screening: float,
           coupling: float = COULOMB_EV_A) -> tuple[float, np.ndarray]:
    """E = coupling * sum_{i<j} q_i q_j exp(-r/lambda)/r for an open cluster."""
    x = system.positions
    q = np.asarray(charges, dtype=np.float64)
    d = x[None, :, :] - x[:, None, :]
    r = np.linalg.norm(d, axis=-1)
    np.fill_diagonal(r, np.inf)
    qq = coupling * q[:, None] * q[None, :]
    ex = np.exp(-r / screening)
    energy = 0.5 * float((qq * ex / r).sum())
    # dE/dr for each pair, divided by r
    de = qq * ex * (-1.0 / (r * r) - 1.0 / (screening * r)) / r
    forces = (de[..., None] * d).sum(axis=1)
    return energy, forces


def yukawa_reference(system: AtomicSystem, charges, screening: float,
                     coupling: float = COULOMB_EV_A) -> tuple[float, np.ndarray]:
    x = system.positions
    n = len(x)
    energy = 0.0
    forces = np.zeros((n, 3))
    for i in range(n):
        for j in range(i + 1, n):
            d = x[j] - x[i]
            r = math.sqrt(float(d @ d))
            pair = coupling * charges[i] * charges[j]
            energy += pair * math.exp(-r / screening) / r
            dEdr = pair * math.exp(-r / screening) * (-1.0 / r**2 - 1.0 / (screening * r))
            forces[i] += dEdr * d / r
            forces[j] -= dEdr * d / r
    return energy, forces


YUKAWA_CHARGES = {11: 1.0, 17: -1.0}


def species_charges(species) -> np.ndarray:
    return np.array([YUKAWA_CHARGES.get(int(z), 0.0) for z in species])


# ------------------------------------------------------------ generators

def _assign_splits(n: int, fractions, rng) -> list[str]:
    order = rng.permutation(n)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    tags = ["train"] * n
    for idx in order[:n_val]:
        tags[idx] = "val"
    for idx in order[n_val : n_val + n_test]:
        tags[idx] = "test"
    return tags


def _jittered_sites(n: int, spacing: float, jitter: float, rng, box: np.ndarray | None = None) -> np.ndarray:
    """n jittered simple-cubic sites; overlaps (< MIN_SEPARATION) are resampled.

    With ``box`` the sites fill a periodic box (grid spacing adapted to it),
    otherwise they form a compact open cluster with the given spacing.
    """
    per_axis = int(math.ceil(n ** (1.0 / 3.0) - 1e-9))
    if box is None:
        per_axis += 1
    grid = np.array(list(itertools.product(range(per_axis), repeat=3)), dtype=np.float64)
    step = np.full(3, spacing) if box is None else box / per_axis
    centre = (per_axis - 1) / 2.0
    for _ in range(1000):
        if box is None:
            score = np.linalg.norm(grid - centre, axis=1) + rng.uniform(0.0, 1.0, len(grid))
            pick = np.argsort(score, kind="stable")[:n]
        else:
            pick = rng.choice(len(grid), size=n, replace=False)
        pos = (grid[pick] + 0.5) * step + rng.normal(0.0, jitter, size=(n, 3))
        d = pos[None] - pos[:, None]
        if box is not None:
            d -= np.round(d / box) * box
        r = np.linalg.norm(d, axis=-1)
        np.fill_diagonal(r, np.inf)
        if r.min() >= MIN_SEPARATION:
            return pos
    raise RuntimeError("could not place atoms without overlaps")


def generate_lj_dataset(n_frames: int, atoms_per_frame: int, density: float = 0.018, jitter: float = 0.1,
                        seed: int = 0, periodic: bool = True, species: int = 18,
                        split_fractions=(0.8, 0.1, 0.1), strain_jitter: float = 0.0) -> Dataset:
    """Randomized LJ configurations labeled with exact energy, forces and stress.

    ``density`` is in atoms/Å^3 (0.018 puts simple-cubic neighbors near the
    pair minimum); ``jitter`` is the Gaussian displacement (Å) of each site.
    """
    if n_frames < 1 or atoms_per_frame < 1 or density <= 0 or jitter < 0:
        raise ValueError("generator parameters must be positive")
    rng = np.random.default_rng(seed)
    side = (atoms_per_frame / density) ** (1.0 / 3.0)
    frames = []
    for _ in range(n_frames):
        box = np.full(3, side) * (1.0 + rng.uniform(-strain_jitter, strain_jitter, 3))
        pos = _jittered_sites(atoms_per_frame, density ** (-1.0 / 3.0), jitter, rng, box if periodic else None)
        if periodic:
            system = AtomicSystem(pos, np.full(atoms_per_frame, species), np.diag(box), (True, True, True))
        else:
            system = AtomicSystem(pos - pos.mean(axis=0), np.full(atoms_per_frame, species))
        e, f, s = lennard_jones(system)
        frames.append(LabeledFrame(system, e, f, s))
    tags = _assign_splits(n_frames, split_fractions, rng)
    prov = (f"lennard_jones n_frames={n_frames} atoms={atoms_per_frame} density={density} "
            f"jitter={jitter} periodic={periodic} seed={seed}")
    return Dataset(frames, tags, prov)


def generate_coulomb_dataset(n_frames: int, atoms_per_frame: int, screening: float = 10.0,
                             density: float = 0.01, jitter: float = 0.4, seed: int = 0,
                             coupling: float = COULOMB_EV_A, neutral: bool = True,
                             split_fractions=(0.8, 0.1, 0.1), radius_jitter: float = 0.0) -> Dataset:
    """Open Na/Cl clusters (+1/-1 charges) labeled with screened Coulomb (Yukawa) energies."""
    if n_frames < 1 or atoms_per_frame < 2 or screening <= 0 or density <= 0:
        raise ValueError("generator parameters must be positive")
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(n_frames):
        dens = density * (1.0 + rng.uniform(-radius_jitter, radius_jitter))
        pos = _jittered_sites(atoms_per_frame, dens ** (-1.0 / 3.0), jitter, rng)
        if neutral:
            z = np.array([11, 17] * (atoms_per_frame // 2) + [11] * (atoms_per_frame % 2))
            z = z[rng.permutation(atoms_per_frame)]
        else:
            z = rng.choice([11, 17], size=atoms_per_frame)
        q = species_charges(z)
        system = AtomicSystem(pos - pos.mean(axis=0), z, total_charge=int(round(q.sum())))
        e, f = yukawa(system, q, screening, coupling)
        frames.append(LabeledFrame(system, e, f))
    tags = _assign_splits(n_frames, split_fractions, rng)
    prov = (f"yukawa n_frames={n_frames} atoms={atoms_per_frame} screening={screening} "
            f"density={density} coupling={coupling} seed={seed}")
    return Dataset(frames, tags, prov)


def relabel(frame: LabeledFrame, system: AtomicSystem, provenance: str) -> LabeledFrame:
    """Label ``system`` with the oracle named in a dataset provenance string."""
    kind = provenance.split()[0] if provenance else ""
    if kind == "lennard_jones":
        e, f, s = lennard_jones(system)
        return LabeledFrame(system, e, f, s)
    if kind == "yukawa":
        kv = dict(t.split("=") for t in provenance.split()[1:] if "=" in t)
        e, f = yukawa(system, species_charges(system.species), float(kv["screening"]),
                      float(kv.get("coupling", COULOMB_EV_A)))
        return LabeledFrame(system, e, f)
    raise ValueError(f"no oracle known for provenance {provenance!r}")
