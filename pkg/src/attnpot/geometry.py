"""Atomic systems, periodic images and differentiable soft-kNN neighbor graphs."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

MAX_ELEMENTS = 110
BRUTE_FORCE_LIMIT = 512


class GeometryError(ValueError):
    pass


@dataclass
class AtomicSystem:
    """Positions in Å, atomic numbers, optional periodic cell (rows are lattice vectors)."""

    positions: np.ndarray
    species: np.ndarray
    cell: np.ndarray | None = None
    pbc: tuple[bool, bool, bool] = (False, False, False)
    total_charge: int = 0
    total_spin: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.species = np.asarray(self.species, dtype=np.int64).reshape(-1)
        self.pbc = tuple(bool(p) for p in np.broadcast_to(np.asarray(self.pbc, dtype=bool), (3,)))
        n = len(self.positions)
        if n < 1:
            raise GeometryError("a system needs at least one atom")
        if len(self.species) != n:
            raise GeometryError(f"{len(self.species)} species for {n} positions")
        if self.species.min() < 1 or self.species.max() > MAX_ELEMENTS:
            raise GeometryError(f"species must lie in [1, {MAX_ELEMENTS}]")
        if self.cell is not None:
            self.cell = np.asarray(self.cell, dtype=np.float64).reshape(3, 3)
        if any(self.pbc):
            if self.cell is None:
                raise GeometryError("periodic system without a cell")
            if abs(np.linalg.det(self.cell)) < 1e-12:
                raise GeometryError("singular cell")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def periodic(self) -> bool:
        return any(self.pbc)

    @property
    def volume(self) -> float:
        if self.cell is None:
            raise GeometryError("system has no cell")
        return float(abs(np.linalg.det(self.cell)))

    def copy(self, **changes) -> "AtomicSystem":
        base = dict(
            positions=self.positions.copy(),
            species=self.species.copy(),
            cell=None if self.cell is None else self.cell.copy(),
            pbc=self.pbc,
            total_charge=self.total_charge,
            total_spin=self.total_spin,
        )
        base.update(changes)
        return AtomicSystem(**base)


def _pbc_mask(system: AtomicSystem) -> np.ndarray:
    return np.asarray(system.pbc, dtype=bool)


def minimum_image_displacement(system: AtomicSystem, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Displacement from atom ``i`` to the nearest periodic image of ``j``.

    Returns the vector (Å) and the integer image shift applied to ``j``.
    """
    n = len(system)
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"atom index out of range for {n} atoms")
    d = system.positions[j] - system.positions[i]
    if not system.periodic:
        return d, np.zeros(3, dtype=np.int64)
    vecs, shifts = minimum_image_vectors(d[None, :], system.cell, _pbc_mask(system))
    return vecs[0], shifts[0]


def minimum_image_vectors(d: np.ndarray, cell: np.ndarray, pbc) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised minimum image for raw displacements ``d`` of shape (..., 3)."""
    pbc = np.asarray(pbc, dtype=bool)
    inv = np.linalg.inv(cell)
    frac = d @ inv
    base = -np.where(pbc, np.round(frac), 0.0)
    best_vec = None
    best_shift = None
    best_r2 = None
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=3) if all(pbc[a] or o[a] == 0 for a in range(3))]
    for off in offsets:
        s = base + np.asarray(off, dtype=np.float64)
        v = d + s @ cell
        r2 = np.einsum("...k,...k->...", v, v)
        if best_r2 is None:
            best_vec, best_shift, best_r2 = v, s, r2
        else:
            better = r2 < best_r2 - 1e-12
            best_vec = np.where(better[..., None], v, best_vec)
            best_shift = np.where(better[..., None], s, best_shift)
            best_r2 = np.where(better, r2, best_r2)
    return best_vec, best_shift.astype(np.int64)


# ------------------------------------------------------------ envelope / RBF

def smooth_envelope(r, r_cut: float, p: int = 5):
    """Polynomial cutoff u(r) with u(0)=1 and u, u', u'' vanishing at ``r_cut``.

    Works on numpy arrays and on Tensors (differentiable).
    """
    if r_cut <= 0:
        raise GeometryError("r_cut must be positive")
    a = -(p + 1) * (p + 2) / 2.0
    b = p * (p + 2.0)
    c = -p * (p + 1) / 2.0
    if not isinstance(r, Tensor):
        x = np.asarray(r, dtype=np.float64) / r_cut
        xc = np.clip(x, 0.0, 1.0)
        xp = xc**p
        return np.where(x < 1.0, 1.0 + a * xp + b * xp * xc + c * xp * xc * xc, 0.0)
    inside = (r.data < r_cut).astype(r.dtype)
    x = dc.mul(r, 1.0 / r_cut)
    xp = x
    for _ in range(p - 1):
        xp = dc.mul(xp, x)
    poly = dc.add(dc.mul(xp, dc.add(dc.mul(dc.add(dc.mul(x, c), b), x), a)), 1.0)
    return dc.mul(poly, inside)


def smoothstep(x):
    """C2 ramp: 0 for x<=0, 1 for x>=1, 6x^5-15x^4+10x^3 between."""
    if not isinstance(x, Tensor):
        xc = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
        return xc * xc * xc * (xc * (6.0 * xc - 15.0) + 10.0)
    inside = ((x.data > 0.0) & (x.data < 1.0)).astype(x.dtype)
    above = (x.data >= 1.0).astype(x.dtype)
    x3 = dc.mul(dc.mul(x, x), x)
    poly = dc.mul(x3, dc.add(dc.mul(x, dc.sub(dc.mul(x, 6.0), 15.0)), 10.0))
    return dc.add(dc.mul(poly, inside), above)


@dataclass(frozen=True)
class RadialBasis:
    num: int = 512
    r_cut: float = 6.0

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(0.0, self.r_cut, self.num)

    @property
    def width(self) -> float:
        return self.r_cut / (self.num - 1) if self.num > 1 else self.r_cut


def gaussian_rbf(r, basis: RadialBasis):
    """exp(-(r - c_m)^2 / (2 sigma^2)) for every center; trailing axis of size ``basis.num``."""
    centers = basis.centers
    inv = 1.0 / (2.0 * basis.width**2)
    if not isinstance(r, Tensor):
        d = np.asarray(r, dtype=np.float64)[..., None] - centers
        return np.exp(-d * d * inv)
    d = dc.sub(dc.reshape(r, r.shape + (1,)), centers.astype(r.dtype))
    return dc.exp(dc.mul(dc.mul(d, d), -inv))


# --------------------------------------------------------------- soft kNN

@dataclass(frozen=True)
class KNNSettings:
    soft: bool = True
    sigmoid_scale: float = 0.2
    lse_scale: float = 0.1
    # accepted for config compatibility; memory strategy is not configurable here
    use_low_mem: bool = True


def _soft_count_threshold(r: np.ndarray, mass: np.ndarray, k: float, t: float,
                          phantoms: float, phantom_r: float) -> np.ndarray:
    """Solve sum_c mass_c sigmoid((tau - r_c)/t) + phantoms*sigmoid((tau - phantom_r)/t) = k per row."""
    def count(tau):
        z = (tau[:, None] - r) / t
        s = (mass * _np_sigmoid(z)).sum(axis=1)
        if phantoms:
            s = s + phantoms * _np_sigmoid((tau - phantom_r) / t)
        return s

    real = mass > 0
    rmin = np.where(real, r, np.inf).min(axis=1, initial=np.inf)
    rmax = np.where(real, r, -np.inf).max(axis=1, initial=-np.inf)
    if phantoms:
        rmin = np.minimum(rmin, phantom_r)
        rmax = np.maximum(rmax, phantom_r)
    lo = rmin - 60.0 * t
    hi = rmax + 60.0 * t
    # bracket to ~1e-11 Å, then Newton polishes to machine precision
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        c = count(mid)
        below = c < k
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    tau = 0.5 * (lo + hi)
    for _ in range(3):
        z = (tau[:, None] - r) / t
        sg = _np_sigmoid(z)
        d = (mass * sg * (1 - sg)).sum(axis=1) / t
        if phantoms:
            sp = _np_sigmoid((tau - phantom_r) / t)
            d = d + phantoms * sp * (1 - sp) / t
        ok = d > 1e-300
        tau = np.where(ok, tau - (count(tau) - k) / np.where(ok, d, 1.0), tau)
    return tau


def _np_sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def soft_threshold(r, k: int, lse_scale: float, mass=None, phantoms: float = 0.0,
                   phantom_r: float | None = None):
    """Soft k-th order statistic of candidate distances (rows are independent).

    tau minimises  t * sum_c m_c softplus((tau - r_c)/t) - k*tau, i.e. it is the
    entropy-smoothed boundary between the k closest candidates and the rest.
    Returns None where no finite threshold exists (k >= total mass).
    """
    rt = r if isinstance(r, Tensor) else Tensor(np.asarray(r, dtype=np.float64))
    rn = rt.data.reshape(-1, rt.shape[-1]) if rt.ndim else rt.data.reshape(1, 1)
    m_t = None if mass is None else (mass if isinstance(mass, Tensor) else Tensor(np.asarray(mass, dtype=rt.dtype)))
    mn = np.ones_like(rn) if m_t is None else np.broadcast_to(m_t.data, rt.shape).reshape(rn.shape)
    pr = 0.0 if phantom_r is None else phantom_r
    total = mn.sum(axis=1) + phantoms
    if np.any(total <= k):
        return None
    tau0 = _soft_count_threshold(rn, mn, float(k), lse_scale, phantoms, pr).reshape(rt.shape[:-1])
    # one differentiable Newton step at the solution gives the implicit-function gradient
    z = dc.mul(dc.sub(dc.reshape(Tensor(tau0.astype(rt.dtype)), tau0.shape + (1,)), rt), 1.0 / lse_scale)
    sg = dc.sigmoid(z)
    w = sg if m_t is None else dc.mul(sg, m_t)
    cnt = dc.sum_(w, axis=-1)
    sgd = sg.data * (1.0 - sg.data) / lse_scale
    deriv = (sgd if m_t is None else sgd * m_t.data).sum(axis=-1)
    if phantoms:
        sp = _np_sigmoid((tau0 - pr) / lse_scale)
        cnt = dc.add(cnt, phantoms * sp)
        deriv = deriv + phantoms * sp * (1 - sp) / lse_scale
    return dc.add(tau0, dc.div(dc.sub(float(k), cnt), deriv))


def soft_knn_weights(distances, k: int, sigmoid_scale: float = 0.2, lse_scale: float = 0.1,
                     mass=None, phantoms: float = 0.0, phantom_r: float | None = None):
    """Smooth kNN membership w_j = sigmoid((tau - r_j)/sigmoid_scale).

    ``distances`` is (..., C); numpy in gives numpy out, Tensor in gives a
    differentiable Tensor.  With fewer candidates than ``k`` every weight is 1.
    """
    if sigmoid_scale <= 0 or lse_scale <= 0:
        raise GeometryError("knn scales must be positive")
    is_tensor = isinstance(distances, Tensor)
    r = distances if is_tensor else Tensor(np.asarray(distances, dtype=np.float64))
    if r.shape[-1] == 0:
        return r if is_tensor else r.data
    tau = soft_threshold(r, k, lse_scale, mass=mass, phantoms=phantoms, phantom_r=phantom_r)
    if tau is None:
        out = Tensor(np.ones(r.shape, dtype=r.dtype))
    else:
        z = dc.mul(dc.sub(dc.reshape(tau, tau.shape + (1,)), r), 1.0 / sigmoid_scale)
        out = dc.sigmoid(z)
    return out if is_tensor else out.data


# ------------------------------------------------------------- candidates

def _plane_spacings(cell: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(cell)
    return 1.0 / np.linalg.norm(inv, axis=0)


def _brute_force_pairs(system: AtomicSystem, r_cut: float):
    x = system.positions
    n = len(x)
    if system.periodic:
        h = _plane_spacings(system.cell)
        reps = [int(math.ceil(r_cut / h[a])) if system.pbc[a] else 0 for a in range(3)]
        shifts = np.array(list(itertools.product(*[range(-m, m + 1) for m in reps])), dtype=np.int64)
    else:
        shifts = np.zeros((1, 3), dtype=np.int64)
    ii, jj, ss, dd = [], [], [], []
    base = x[None, :, :] - x[:, None, :]
    ai = np.arange(n)
    for s in shifts:
        off = s @ system.cell if system.periodic else np.zeros(3)
        v = base + off
        r2 = np.einsum("ijk,ijk->ij", v, v)
        ok = r2 < r_cut * r_cut
        if not s.any():
            ok[ai, ai] = False
        i, j = np.nonzero(ok)
        ii.append(i)
        jj.append(j)
        ss.append(np.broadcast_to(s, (len(i), 3)))
        dd.append(np.sqrt(r2[i, j]))
    return np.concatenate(ii), np.concatenate(jj), np.concatenate(ss), np.concatenate(dd)


def _cell_list_pairs(system: AtomicSystem, r_cut: float):
    x = system.positions
    n = len(x)
    if system.periodic:
        if not all(system.pbc):
            return None
        h = _plane_spacings(system.cell)
        nb = np.floor(h / r_cut).astype(np.int64)
        if np.any(nb < 3):
            return None
        frac = x @ np.linalg.inv(system.cell)
        wrap = np.floor(frac).astype(np.int64)
        frac = frac - wrap
        xw = frac @ system.cell
        b3 = np.minimum((frac * nb).astype(np.int64), nb - 1)
    else:
        lo = x.min(axis=0)
        ext = x.max(axis=0) - lo
        nb = np.maximum(1, np.floor(ext / r_cut)).astype(np.int64)
        b3 = np.minimum(((x - lo) / np.where(ext > 0, ext, 1.0) * nb).astype(np.int64), nb - 1)
        wrap = np.zeros((n, 3), dtype=np.int64)
        xw = x
    bid = (b3[:, 0] * nb[1] + b3[:, 1]) * nb[2] + b3[:, 2]
    order = np.argsort(bid, kind="stable")
    counts = np.bincount(bid, minlength=int(nb.prod()))
    occ = int(counts.max())
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(n) - start[bid[order]]
    table = np.full((int(nb.prod()), occ), -1, dtype=np.int64)
    table[bid[order], slot] = order
    ii, jj, ss, dd = [], [], [], []
    ai = np.arange(n)
    for off in itertools.product((-1, 0, 1), repeat=3):
        nb3 = b3 + np.asarray(off)
        if system.periodic:
            img = np.floor_divide(nb3, nb)
            nb3 = nb3 - img * nb
            valid = np.ones(n, dtype=bool)
        else:
            img = np.zeros_like(nb3)
            valid = np.all((nb3 >= 0) & (nb3 < nb), axis=1)
            nb3 = np.clip(nb3, 0, nb - 1)
        nid = (nb3[:, 0] * nb[1] + nb3[:, 1]) * nb[2] + nb3[:, 2]
        cand = table[nid]
        ok = (cand >= 0) & valid[:, None]
        i = np.broadcast_to(ai[:, None], cand.shape)[ok]
        j = cand[ok]
        s_bin = np.broadcast_to(img[:, None, :], cand.shape + (3,))[ok]
        shift = s_bin + wrap[j] - wrap[i]
        v = xw[j] - xw[i]
        if system.periodic:
            v = v + s_bin @ system.cell
        r2 = np.einsum("ij,ij->i", v, v)
        keep = (r2 < r_cut * r_cut) & ~((i == j) & ~shift.any(axis=1))
        ii.append(i[keep])
        jj.append(j[keep])
        ss.append(shift[keep])
        dd.append(np.sqrt(r2[keep]))
    return np.concatenate(ii), np.concatenate(jj), np.concatenate(ss), np.concatenate(dd)


def candidate_pairs(system: AtomicSystem, r_cut: float, method: str = "auto"):
    """All (i, j, image shift, distance) with 0 < r_ij < r_cut."""
    if r_cut <= 0:
        raise GeometryError("r_cut must be positive")
    out = None
    if method == "cell" or (method == "auto" and len(system) >= BRUTE_FORCE_LIMIT):
        out = _cell_list_pairs(system, r_cut)
    if out is None:
        out = _brute_force_pairs(system, r_cut)
    return out


# ------------------------------------------------------------ neighbor graph

@dataclass
class NeighborGraph:
    """Per-atom kNN stencils.

    ``neighbors``/``shifts``/``mask`` give the k neighbor slots; the self token
    is slot 0 of every token block and is not stored here.  The candidate
    arrays hold every atom within the cutoff (stencil first, sorted by
    distance) and feed the soft threshold.  ``distances``, ``directions``,
    ``weights`` and ``envelope`` are evaluated values for inspection; the
    model recomputes them differentiably through :func:`edge_geometry`.
    """

    k: int
    r_cut: float
    settings: KNNSettings
    neighbors: np.ndarray
    shifts: np.ndarray
    mask: np.ndarray
    cand_index: np.ndarray
    cand_shift: np.ndarray
    cand_mask: np.ndarray
    distances: np.ndarray = field(default=None)
    directions: np.ndarray = field(default=None)
    weights: np.ndarray = field(default=None)
    envelope: np.ndarray = field(default=None)

    @property
    def num_atoms(self) -> int:
        return self.neighbors.shape[0]

    @property
    def num_slots(self) -> int:
        return self.k + 1


@dataclass
class EdgeGeometry:
    vectors: Tensor      # (N, k, 3)
    distances: Tensor    # (N, k)
    directions: Tensor   # (N, k, 3)
    weights: Tensor      # (N, k) soft membership, 0 on padded slots
    envelope: Tensor     # (N, k)


def build_neighbor_graph(system: AtomicSystem, k: int = 20, r_cut: float = 6.0,
                         settings: KNNSettings | None = None, method: str = "auto",
                         with_geometry: bool = True) -> NeighborGraph:
    """kNN stencils plus the full candidate list; ``with_geometry=False`` skips the inspection values."""
    if k < 1:
        raise GeometryError("k must be at least 1")
    settings = settings or KNNSettings()
    n = len(system)
    i, j, s, d = candidate_pairs(system, r_cut, method)
    order = np.lexsort((s[:, 2], s[:, 1], s[:, 0], j, d, i))
    i, j, s, d = i[order], j[order], s[order], d[order]
    counts = np.bincount(i, minlength=n)
    width = max(k, int(counts.max()) if len(counts) else 0)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(len(i)) - start[i]
    cand_index = np.repeat(np.arange(n)[:, None], width, axis=1)
    cand_shift = np.zeros((n, width, 3), dtype=np.int64)
    cand_mask = np.zeros((n, width), dtype=bool)
    cand_index[i, rank] = j
    cand_shift[i, rank] = s
    cand_mask[i, rank] = True
    graph = NeighborGraph(
        k=k, r_cut=float(r_cut), settings=settings,
        neighbors=cand_index[:, :k].copy(), shifts=cand_shift[:, :k].copy(), mask=cand_mask[:, :k].copy(),
        cand_index=cand_index, cand_shift=cand_shift, cand_mask=cand_mask,
    )
    if not with_geometry:
        return graph
    with dc.no_grad():
        geo = edge_geometry(graph, Tensor(system.positions), None if system.cell is None else Tensor(system.cell))
    graph.distances = geo.distances.data
    graph.directions = geo.directions.data
    graph.weights = geo.weights.data
    graph.envelope = geo.envelope.data
    return graph


def merge_graphs(graphs: list[NeighborGraph], offsets: list[int]) -> NeighborGraph:
    """Concatenate graphs of a batch, shifting atom indices by ``offsets``."""
    k = graphs[0].k
    width = max(g.cand_index.shape[1] for g in graphs)

    def pad(a, fill):
        extra = width - a.shape[1]
        if extra == 0:
            return a
        shape = (a.shape[0], extra) + a.shape[2:]
        return np.concatenate([a, np.full(shape, fill, dtype=a.dtype)], axis=1)

    ci, cs, cm = [], [], []
    for g, off in zip(graphs, offsets):
        own = np.arange(g.num_atoms)[:, None] + off
        idx = np.where(g.cand_mask, g.cand_index + off, own)
        ci.append(pad(idx, 0) if width == idx.shape[1] else np.concatenate(
            [idx, np.repeat(own, width - idx.shape[1], axis=1)], axis=1))
        cs.append(pad(g.cand_shift, 0))
        cm.append(pad(g.cand_mask, False))
    cand_index = np.concatenate(ci)
    cand_shift = np.concatenate(cs)
    cand_mask = np.concatenate(cm)
    cat = lambda name: None if getattr(graphs[0], name) is None else np.concatenate([getattr(g, name) for g in graphs])
    return NeighborGraph(
        k=k, r_cut=graphs[0].r_cut, settings=graphs[0].settings,
        neighbors=cand_index[:, :k].copy(), shifts=cand_shift[:, :k].copy(), mask=cand_mask[:, :k].copy(),
        cand_index=cand_index, cand_shift=cand_shift, cand_mask=cand_mask,
        distances=cat("distances"), directions=cat("directions"),
        weights=cat("weights"), envelope=cat("envelope"),
    )


def edge_geometry(graph: NeighborGraph, positions: Tensor, cell: Tensor | None = None,
                  cell_index: np.ndarray | None = None) -> EdgeGeometry:
    """Differentiable stencil geometry from positions (and cell, for periodic images).

    ``cell`` is (3, 3), or (B, 3, 3) together with ``cell_index`` giving the
    batch member of every atom.
    """
    k, r_cut, st = graph.k, graph.r_cut, graph.settings
    dtype = positions.dtype
    n, width = graph.cand_index.shape
    cmask = graph.cand_mask.astype(dtype)
    xi = dc.reshape(positions, (n, 1, 3))
    xj = dc.gather(positions, graph.cand_index, axis=0)
    vec = dc.sub(xj, xi)
    if cell is not None and graph.cand_shift.any():
        shifts = graph.cand_shift.astype(dtype)
        if cell.ndim == 2:
            off = dc.matmul(shifts.reshape(n * width, 3), cell).reshape(n, width, 3)
        else:
            cells = dc.gather(cell, cell_index, axis=0)  # (n, 3, 3)
            off = dc.matmul(shifts, cells)
        vec = dc.add(vec, off)
    # padded candidates get a fixed far-away vector (no gradient, zero mass)
    far = np.zeros((n, width, 3), dtype=dtype)
    far[..., 0] = 2.0 * r_cut + 1.0
    vec = dc.add(dc.mul(vec, cmask[..., None]), far * (1.0 - cmask[..., None]))
    r2 = dc.sum_(dc.mul(vec, vec), axis=-1)
    inv_r = dc.rsqrt(r2)
    r = dc.mul(r2, inv_r)
    u = dc.mul(smooth_envelope(r, r_cut), cmask)

    r_st = r[:, :k]
    vec_st = vec[:, :k]
    dirs = dc.mul(vec_st, dc.reshape(inv_r[:, :k], (n, k, 1)))
    smask = cmask[:, :k]
    if not st.soft:
        w = Tensor(smask.copy())
    else:
        sig = soft_knn_weights(r, k, st.sigmoid_scale, st.lse_scale, mass=u,
                               phantoms=k + 1.0, phantom_r=r_cut)[:, :k]
        # taper slot k to zero as the first excluded candidate approaches it;
        # the softmin runs colder than the threshold so dense shells lose few slots
        t = 0.25 * st.lse_scale
        if width > k:
            rex = r[:, k:]
            ex_mask = cmask[:, k:]
            ref = np.minimum(np.where(ex_mask > 0, rex.data, np.inf).min(axis=1), r_cut)
            terms = dc.mul(dc.exp(dc.mul(dc.sub(ref[:, None], rex), 1.0 / t)), ex_mask)
            tot = dc.add(dc.sum_(terms, axis=1), np.exp((ref - r_cut) / t))
            m = dc.sub(ref, dc.mul(dc.log(tot), t))
        else:
            m = Tensor(np.full(n, r_cut, dtype=dtype))
        gap = dc.mul(dc.sub(dc.reshape(m, (n, 1)), r_st), 1.0 / st.sigmoid_scale)
        w = dc.mul(dc.mul(sig, smoothstep(gap)), smask)
    return EdgeGeometry(vectors=vec_st, distances=r_st, directions=dirs, weights=w, envelope=u[:, :k])


def replicate_supercell(system: AtomicSystem, factors) -> AtomicSystem:
    """Tile a periodic system ``factors`` times along its lattice vectors (image-major order)."""
    if not system.periodic:
        raise GeometryError("supercell replication needs a periodic system")
    f = [int(v) for v in factors]
    if len(f) != 3 or min(f) < 1:
        raise GeometryError("factors must be three positive integers")
    images = np.array(list(itertools.product(range(f[0]), range(f[1]), range(f[2]))), dtype=np.float64)
    offsets = images @ system.cell
    pos = (system.positions[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
    species = np.tile(system.species, len(images))
    cell = system.cell * np.asarray(f, dtype=np.float64)[:, None]
    return replace(system.copy(), positions=pos, species=species, cell=cell)


def pairwise_vectors(positions: Tensor, cell=None, pbc=(False, False, False), rows: slice | None = None):
    """Differentiable displacement vectors x_j - x_i (minimum image if periodic) for a block of rows."""
    rows = rows or slice(0, positions.shape[0])
    xi = positions[rows]
    d = dc.sub(dc.reshape(positions, (1,) + positions.shape), dc.reshape(xi, (xi.shape[0], 1, 3)))
    if cell is not None and any(pbc):
        cd = cell.data if isinstance(cell, Tensor) else np.asarray(cell)
        _, shifts = minimum_image_vectors(d.data, cd, pbc)
        if shifts.any():
            d = dc.add(d, dc.matmul(shifts.astype(positions.dtype), cell))
    return d
