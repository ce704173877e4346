"""Model assembly: embeddings, stacked neighbor/node attention blocks, energy, force and stress heads."""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .attention import (
    AttentionConfig,
    NodeSegment,
    apply_ffn,
    init_ffn,
    init_linear,
    init_neighbor_attention,
    init_node_attention,
    neighbor_attention,
    node_attention,
    rms_norm,
    stencil_log_mask,
)
from .diffcore import Tensor
from .encodings import DegreeAllocation, FrequencyBank, build_lae_code, self_token_code, spherical_harmonics_flat
from .geometry import (
    MAX_ELEMENTS,
    AtomicSystem,
    KNNSettings,
    NeighborGraph,
    RadialBasis,
    build_neighbor_graph,
    edge_geometry,
    gaussian_rbf,
    merge_graphs,
)

DTYPES = {"fp64": np.float64, "fp32": np.float32}
INVARIANT_LMAX = 2


class ModelError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    hidden_size: int = 512
    num_layers: int = 6
    num_heads: int = 8
    r_cut: float = 6.0
    k: int = 20
    lae: bool = True
    node_attention: bool = True
    erope: bool = True
    lmax: int = 3
    degree_repeats: tuple | None = None
    num_freq: int = 32
    omega_min: float = 2 * math.pi / 50.0
    omega_max: float = 2 * math.pi / 0.5
    rbf_size: int = 512
    node_direction_expansion_size: int = 10
    edge_direction_expansion_size: int = 6
    # "raw": truncated harmonics of the directions (not rotation invariant);
    # "invariant": per-degree inner products of those harmonics;
    # "none": directions enter only through the LAE modulation
    direction_features: str = "raw"
    max_num_elements: int = MAX_ELEMENTS
    max_charge: int = 10
    max_spin: int = 10
    ffn_multiplier: int = 2
    output_hidden_layers: int = 2
    knn_soft: bool = True
    knn_sigmoid_scale: float = 0.2
    knn_lse_scale: float = 0.1
    knn_use_low_mem: bool = True
    dtype: str = "fp64"
    force_mode: str = "direct"
    stress: bool = False
    direct_head: bool = True
    energy_scale: float = 1.0
    force_scale: float = 1.0
    node_chunk_elements: int = 1 << 22

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if self.direction_features not in ("raw", "invariant", "none"):
            raise ValueError(f"unknown direction_features {self.direction_features!r}")
        if self.force_mode not in ("direct", "conservative"):
            raise ValueError(f"unknown force_mode {self.force_mode!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.degree_repeats is not None:
            self.degree_repeats = tuple(int(r) for r in self.degree_repeats)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def alloc(self) -> DegreeAllocation:
        if self.degree_repeats is not None:
            return DegreeAllocation(self.degree_repeats)
        return DegreeAllocation.balanced(self.head_dim, self.lmax)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(
            d_model=self.hidden_size, num_heads=self.num_heads, lae=self.lae, alloc=self.alloc,
            erope=self.erope, bank=FrequencyBank(self.num_freq, self.omega_min, self.omega_max),
            chunk_elements=self.node_chunk_elements,
        )

    @property
    def knn(self) -> KNNSettings:
        return KNNSettings(self.knn_soft, self.knn_sigmoid_scale, self.knn_lse_scale, self.knn_use_low_mem)

    @property
    def rbf(self) -> RadialBasis:
        return RadialBasis(self.rbf_size, self.r_cut)

    @property
    def edge_dir_dim(self) -> int:
        if self.direction_features == "none":
            return 0
        return INVARIANT_LMAX + 1 if self.direction_features == "invariant" else self.edge_direction_expansion_size

    @property
    def node_dir_dim(self) -> int:
        if self.direction_features == "none":
            return 0
        return INVARIANT_LMAX + 1 if self.direction_features == "invariant" else self.node_direction_expansion_size

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["degree_repeats"] is not None:
            d["degree_repeats"] = list(d["degree_repeats"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        table = {
            "small": dict(hidden_size=512, num_layers=6, num_heads=8),
            "medium": dict(hidden_size=640, num_layers=10, num_heads=10),
            "large": dict(hidden_size=1024, num_layers=8, num_heads=16),
            "xlarge": dict(hidden_size=2048, num_layers=12, num_heads=32),
            "toy": dict(hidden_size=32, num_layers=2, num_heads=4, k=12, rbf_size=32, num_freq=16),
        }
        if name not in table:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(table)}")
        return cls(**{**table[name], **overrides})


@dataclass
class PredictionOutput:
    energy: float
    forces: np.ndarray | None
    stress: np.ndarray | None = None
    atom_energies: np.ndarray | None = None


@dataclass
class Batch:
    """Several systems packed into one flat atom list."""

    systems: list[AtomicSystem]
    graph: NeighborGraph
    positions: np.ndarray
    species: np.ndarray
    system_index: np.ndarray
    offsets: np.ndarray
    cells: np.ndarray          # (B, 3, 3); zeros for non-periodic members
    charges: np.ndarray
    spins: np.ndarray

    @property
    def num_systems(self) -> int:
        return len(self.systems)

    @property
    def num_atoms(self) -> int:
        return len(self.positions)

    @property
    def any_periodic(self) -> bool:
        return any(s.periodic for s in self.systems)


def make_batch(systems, cfg: ModelConfig, graphs: list[NeighborGraph] | None = None) -> Batch:
    if isinstance(systems, AtomicSystem):
        systems = [systems]
    if graphs is None:
        graphs = [build_neighbor_graph(s, cfg.k, cfg.r_cut, cfg.knn, with_geometry=False) for s in systems]
    counts = np.array([len(s) for s in systems])
    offsets = np.concatenate([[0], np.cumsum(counts)])
    species = np.concatenate([s.species for s in systems])
    if species.max() > cfg.max_num_elements:
        raise ModelError(f"species {species.max()} outside the embedding table")
    for s in systems:
        if abs(s.total_charge) > cfg.max_charge or abs(s.total_spin) > cfg.max_spin:
            raise ModelError("charge/spin outside the embedding table")
    graph = graphs[0] if len(graphs) == 1 else merge_graphs(graphs, list(offsets[:-1]))
    cells = np.stack([s.cell if (s.cell is not None and s.periodic) else np.zeros((3, 3)) for s in systems])
    return Batch(
        systems=list(systems), graph=graph,
        positions=np.concatenate([s.positions for s in systems]),
        species=species,
        system_index=np.repeat(np.arange(len(systems)), counts),
        offsets=offsets, cells=cells,
        charges=np.array([s.total_charge for s in systems]),
        spins=np.array([s.total_spin for s in systems]),
    )


class _NullTimer:
    def section(self, name):
        return contextlib.nullcontext()


def init_parameters(cfg: ModelConfig, seed: int = 0) -> dc.ParameterStore:
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    d = cfg.hidden_size
    st = dc.ParameterStore()
    att = cfg.attention
    st.add("embed.species", rng.normal(0.0, 1.0, size=(cfg.max_num_elements + 1, d)).astype(dt))
    st.add("embed.charge", rng.normal(0.0, 1.0, size=(2 * cfg.max_charge + 1, d)).astype(dt))
    st.add("embed.spin", rng.normal(0.0, 1.0, size=(2 * cfg.max_spin + 1, d)).astype(dt))
    init_linear(st, "embed.edge_center", d, d, rng, dtype=dt)
    init_linear(st, "embed.edge_neighbor", d, d, rng, bias=False, dtype=dt)
    init_linear(st, "embed.rbf", cfg.rbf_size, d, rng, bias=False, dtype=dt)
    if cfg.edge_dir_dim:
        init_linear(st, "embed.edge_dir", cfg.edge_dir_dim, d, rng, bias=False, dtype=dt)
    init_linear(st, "embed.node", d, d, rng, dtype=dt)
    if cfg.node_dir_dim:
        init_linear(st, "embed.node_dir", cfg.node_dir_dim, d, rng, bias=False, dtype=dt)
    for l in range(cfg.num_layers):
        pre = f"layer{l}"
        st.add(f"{pre}.norm_nbr", np.ones(d, dtype=dt))
        init_neighbor_attention(st, f"{pre}.nbr_attn", att, rng, dtype=dt)
        st.add(f"{pre}.norm_edge_ffn", np.ones(d, dtype=dt))
        init_ffn(st, f"{pre}.edge_ffn", d, cfg.ffn_multiplier, rng, dtype=dt)
        if cfg.node_attention:
            st.add(f"{pre}.norm_node", np.ones(d, dtype=dt))
            init_node_attention(st, f"{pre}.node_attn", att, rng, dtype=dt)
        st.add(f"{pre}.norm_node_ffn", np.ones(d, dtype=dt))
        init_ffn(st, f"{pre}.node_ffn", d, cfg.ffn_multiplier, rng, dtype=dt)
        init_linear(st, f"{pre}.merge", 2 * d, d, rng, scale=0.5, dtype=dt)
    st.add("head.norm", np.ones(d, dtype=dt))
    for h in range(cfg.output_hidden_layers):
        init_linear(st, f"head.hidden{h}", d, d, rng, dtype=dt)
    init_linear(st, "head.out", d, 1, rng, scale=0.1, dtype=dt)
    st.add("head.reference", np.zeros(cfg.max_num_elements + 1, dtype=dt))
    if cfg.direct_head:
        st.add("force.norm", np.ones(d, dtype=dt))
        init_linear(st, "force.edge_gate", d, 1, rng, scale=0.1, dtype=dt)
        init_linear(st, "force.node_gate", d, 1, rng, scale=0.1, bias=False, dtype=dt)
    return st


def _direction_features(cfg: ModelConfig, dirs, wu, n: int, k: int):
    """Edge (N, k, e) and node (N, n_dim) direction channels (None, None when disabled)."""
    if cfg.direction_features == "none":
        return None, None
    if cfg.direction_features == "raw":
        lmax = int(math.ceil(math.sqrt(max(cfg.edge_direction_expansion_size, cfg.node_direction_expansion_size)))) - 1
        y = spherical_harmonics_flat(lmax, dirs, check_norm=False)           # (N, k, (lmax+1)^2)
        edge = y[..., : cfg.edge_direction_expansion_size]
        node = dc.sum_(dc.mul(y[..., : cfg.node_direction_expansion_size], dc.reshape(wu, (n, k, 1))), axis=1)
        return edge, node
    y = spherical_harmonics_flat(INVARIANT_LMAX, dirs, check_norm=False)
    nvec = dc.sum_(dc.mul(y, dc.reshape(wu, (n, k, 1))), axis=1)               # (N, (L+1)^2)
    edge_parts, node_parts = [], []
    for l in range(INVARIANT_LMAX + 1):
        sl = slice(l * l, (l + 1) * (l + 1))
        nl = nvec[:, sl]
        node_parts.append(dc.sum_(dc.mul(nl, nl), axis=-1, keepdims=True))
        edge_parts.append(dc.sum_(dc.mul(y[..., sl], dc.reshape(nl, (n, 1, sl.stop - sl.start))), axis=-1, keepdims=True))
    return dc.concat(edge_parts, axis=-1), dc.concat(node_parts, axis=-1)


def _check_finite(x: Tensor, where: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise ModelError(f"non-finite values produced in {where}")


def forward(p: dict, batch: Batch, cfg: ModelConfig, positions: Tensor, cells: Tensor | None = None,
            direct: bool = False, export: dict | None = None, timer=None) -> dict:
    """Differentiable forward pass over a batch.

    Returns a dict with ``energy`` (B,), ``atom_energy`` (N,), and when
    ``direct`` is set, ``forces`` (N, 3) from the direct head.
    """
    timer = timer or _NullTimer()
    dt = positions.dtype
    g = batch.graph
    n, k = g.neighbors.shape
    d = cfg.hidden_size
    att = cfg.attention

    with timer.section("embedding"):
        cell_arg = None
        if cells is not None and batch.any_periodic:
            cell_arg = cells if batch.num_systems > 1 else cells[0]
        geo = edge_geometry(g, positions, cell_arg, batch.system_index if batch.num_systems > 1 else None)
        wu = dc.mul(geo.weights, geo.envelope)
        log_mask = stencil_log_mask(geo.weights, geo.envelope, g.mask, dt)
        edge_dir, node_dir = _direction_features(cfg, geo.directions, wu, n, k)

        table = p["embed.species"]
        center_tab = dc.linear(table, p["embed.edge_center.w"], p["embed.edge_center.b"])
        nbr_tab = dc.matmul(table, p["embed.edge_neighbor.w"])
        nbr_species = batch.species[g.neighbors]
        edge = dc.add(
            dc.reshape(dc.gather(center_tab, batch.species, axis=0), (n, 1, d)),
            dc.gather(nbr_tab, nbr_species, axis=0),
        )
        edge = dc.add(edge, dc.matmul(gaussian_rbf(geo.distances, cfg.rbf), p["embed.rbf.w"]))
        if edge_dir is not None:
            edge = dc.add(edge, dc.matmul(edge_dir, p["embed.edge_dir.w"]))

        charge_idx = (batch.charges + cfg.max_charge)[batch.system_index]
        spin_idx = (batch.spins + cfg.max_spin)[batch.system_index]
        node_in = dc.add(dc.gather(table, batch.species, axis=0), dc.gather(p["embed.charge"], charge_idx, axis=0))
        node_in = dc.add(node_in, dc.gather(p["embed.spin"], spin_idx, axis=0))
        node = dc.linear(node_in, p["embed.node.w"], p["embed.node.b"])
        if node_dir is not None:
            node = dc.add(node, dc.matmul(node_dir, p["embed.node_dir.w"]))
        tokens = dc.concat([dc.reshape(node, (n, 1, d)), edge], axis=1)     # (N, k+1, d)

        gamma = None
        if cfg.lae:
            codes = build_lae_code(geo.directions, att.alloc, check_norm=False)  # (N, k, d_hr)
            selfc = np.broadcast_to(self_token_code(att.alloc, dt), (n, 1, att.alloc.expanded_dim))
            gamma = dc.concat([Tensor(np.ascontiguousarray(selfc)), codes], axis=1)
        segments = [
            NodeSegment(int(batch.offsets[b]), int(batch.offsets[b + 1]),
                        None if not s.periodic or cells is None else (cells[b] if cells.ndim == 3 else cells),
                        s.pbc)
            for b, s in enumerate(batch.systems)
        ]
    _check_finite(tokens, "embedding")

    for l in range(cfg.num_layers):
        pre = f"layer{l}"
        with timer.section("neighbor_attention"):
            h = rms_norm(tokens, p[f"{pre}.norm_nbr"])
            tokens = dc.add(tokens, neighbor_attention(p, f"{pre}.nbr_attn", h, att, log_mask, g.neighbors,
                                                       gamma, export))
        with timer.section("neighbor_ffn"):
            tokens = dc.add(tokens, apply_ffn(p, f"{pre}.edge_ffn", rms_norm(tokens, p[f"{pre}.norm_edge_ffn"])))
        node = tokens[:, 0, :]
        if cfg.node_attention:
            with timer.section("node_attention"):
                h = rms_norm(node, p[f"{pre}.norm_node"])
                node = dc.add(node, node_attention(p, f"{pre}.node_attn", h, att, segments,
                                                   positions if cfg.erope else None, export))
        with timer.section("node_ffn"):
            node = dc.add(node, apply_ffn(p, f"{pre}.node_ffn", rms_norm(node, p[f"{pre}.norm_node_ffn"])))
        with timer.section("merge"):
            nb = dc.broadcast_to(dc.reshape(node, (n, 1, d)), (n, k + 1, d))
            merged = dc.linear(dc.concat([tokens, nb], axis=-1), p[f"{pre}.merge.w"], p[f"{pre}.merge.b"])
            tokens = dc.add(tokens, merged)
        _check_finite(tokens, f"layer {l}")

    out = {}
    with timer.section("head"):
        hcur = rms_norm(node, p["head.norm"])
        for hl in range(cfg.output_hidden_layers):
            hcur = dc.gelu(dc.linear(hcur, p[f"head.hidden{hl}.w"], p[f"head.hidden{hl}.b"]))
        e_atom = dc.reshape(dc.linear(hcur, p["head.out.w"], p["head.out.b"]), (n,))
        e_atom = dc.add(dc.mul(e_atom, cfg.energy_scale), dc.gather(p["head.reference"], batch.species, axis=0))
        out["atom_energy"] = e_atom
        out["energy"] = dc.scatter_add(e_atom, batch.system_index, batch.num_systems)
        if direct:
            if "force.norm" not in p:
                raise ModelError("direct force head requested but the model has none")
            ht = rms_norm(tokens, p["force.norm"])
            gate = dc.reshape(dc.linear(ht[:, 1:, :], p["force.edge_gate.w"], p["force.edge_gate.b"]), (n, k))
            contrib = dc.mul(geo.directions, dc.reshape(dc.mul(gate, wu), (n, k, 1)))
            f_edge = dc.sum_(contrib, axis=1)
            nvec = dc.sum_(dc.mul(geo.directions, dc.reshape(wu, (n, k, 1))), axis=1)
            c_node = dc.matmul(ht[:, 0, :], p["force.node_gate.w"])
            forces = dc.add(f_edge, dc.mul(nvec, c_node))
            out["forces"] = dc.mul(forces, cfg.force_scale)
    _check_finite(out["energy"], "energy head")
    return out


class Potential:
    """Parameters plus configuration, with prediction helpers."""

    def __init__(self, cfg: ModelConfig, params: dc.ParameterStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed)

    # -- inference -------------------------------------------------------
    def _positions(self, batch):
        return Tensor(batch.positions.astype(self.cfg.np_dtype))

    def energy(self, system: AtomicSystem, graph: NeighborGraph | None = None) -> float:
        return float(self.energies([system], None if graph is None else [graph])[0])

    def energies(self, systems, graphs=None) -> np.ndarray:
        batch = make_batch(systems, self.cfg, graphs)
        with dc.no_grad():
            out = forward(self.params.tensors(), batch, self.cfg, self._positions(batch),
                          Tensor(batch.cells.astype(self.cfg.np_dtype)))
        return out["energy"].data.astype(np.float64)

    def predict(self, system: AtomicSystem, mode: str | None = None, stress: bool | None = None,
                export: dict | None = None) -> PredictionOutput:
        mode = mode or self.cfg.force_mode
        stress = self.cfg.stress if stress is None else stress
        if mode == "direct":
            return self.predict_direct(system, export=export)
        return self.predict_conservative(system, stress=stress, export=export)

    def predict_direct(self, system: AtomicSystem, export: dict | None = None) -> PredictionOutput:
        if not self.cfg.direct_head or "force.norm" not in self.params:
            raise ModelError("model has no direct force head")
        batch = make_batch([system], self.cfg)
        with dc.no_grad():
            out = forward(self.params.tensors(), batch, self.cfg, self._positions(batch),
                          Tensor(batch.cells.astype(self.cfg.np_dtype)), direct=True, export=export)
        return PredictionOutput(
            energy=float(out["energy"].data[0]),
            forces=out["forces"].data.astype(np.float64),
            atom_energies=out["atom_energy"].data.astype(np.float64),
        )

    def predict_conservative(self, system: AtomicSystem, stress: bool = False,
                             export: dict | None = None, allow_hard: bool = False) -> PredictionOutput:
        """Forces (and optionally stress) as exact gradients of the energy.

        ``allow_hard`` permits gradients of a hard-kNN model, which are only
        piecewise valid; it exists for the smoothness negative control.
        """
        if stress and not system.periodic:
            raise ModelError("stress needs a periodic system")
        if not self.cfg.knn_soft and not allow_hard:
            raise ModelError("gradient forces need the soft kNN graph (knn_soft=True)")
        batch = make_batch([system], self.cfg)
        dt = self.cfg.np_dtype
        with dc.Tape() as tape:
            pos = tape.watch(Tensor(batch.positions.astype(dt)))
            strain = tape.watch(Tensor(np.zeros((3, 3), dtype=dt))) if stress else None
            cells = Tensor(batch.cells.astype(dt))
            x = pos
            if stress:
                sym = dc.mul(dc.add(strain, dc.transpose(strain)), 0.5)
                deform = dc.add(sym, np.eye(3, dtype=dt))
                x = dc.matmul(pos, dc.transpose(deform))
                cells = dc.reshape(dc.matmul(cells, dc.transpose(deform)), (1, 3, 3))
            out = forward(self.params.tensors(), batch, self.cfg, x, cells, export=export)
            e = dc.sum_(out["energy"])
            tape.backward(e)
        forces = -pos.grad.astype(np.float64)
        st = None
        if stress:
            st = strain.grad.astype(np.float64) / system.volume
        return PredictionOutput(
            energy=float(e.data), forces=forces, stress=st,
            atom_energies=out["atom_energy"].data.astype(np.float64),
        )

    def energy_and_forces(self, system: AtomicSystem, mode: str | None = None) -> tuple[float, np.ndarray]:
        out = self.predict(system, mode=mode, stress=False)
        return out.energy, out.forces

    # -- persistence -----------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        meta = {"model_config": self.cfg.to_dict(), "parameters": self.params.names()}
        meta.update(extra or {})
        dc.save_checkpoint(path, self.params, meta)
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Potential":
        manifest = dc.read_checkpoint_manifest(path)
        cfg = ModelConfig.from_dict(manifest["extra"]["model_config"])
        return cls(cfg, dc.load_checkpoint(path))

    def with_config(self, **changes) -> "Potential":
        cfg = replace(self.cfg, **changes)
        params = self.params if cfg.np_dtype == self.cfg.np_dtype else self.params.astype(cfg.np_dtype)
        return Potential(cfg, params)
