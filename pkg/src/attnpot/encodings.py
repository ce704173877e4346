"""Angular codes from real spherical harmonics and the sinc distance bias."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _mul(a, b):
    return dc.mul(a, b) if _is_tensor(a, b) else a * b


def _add(a, b):
    return dc.add(a, b) if _is_tensor(a, b) else a + b


def _sub(a, b):
    return dc.sub(a, b) if _is_tensor(a, b) else a - b


def legendre_polynomial(degree: int, x):
    """P_l(x) by Bonnet's recurrence: (n+1) P_{n+1} = (2n+1) x P_n - n P_{n-1}."""
    if degree < 0:
        raise ValueError("degree must be non-negative")
    if not isinstance(x, Tensor):
        x = np.asarray(x, dtype=np.float64)
        if np.any(np.abs(x) > 1 + 1e-12):
            raise ValueError("legendre_polynomial expects |x| <= 1")
    p_prev = Tensor(np.ones(x.shape, dtype=x.dtype)) if isinstance(x, Tensor) else np.ones_like(x)
    if degree == 0:
        return p_prev
    p = x
    for n in range(1, degree):
        p, p_prev = _sub(_mul(_mul(x, p), (2 * n + 1) / (n + 1)), _mul(p_prev, n / (n + 1))), p
    return p


def _sh_norm(l: int, m: int) -> float:
    c = (2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m)
    return math.sqrt(c) * (math.sqrt(2.0) if m else 1.0)


class _Dual:
    """Value plus gradient with respect to the 3 direction components (forward mode)."""

    __slots__ = ("v", "d")

    def __init__(self, v, d):
        self.v, self.d = v, d

    def __add__(self, o):
        return _Dual(self.v + o.v, self.d + o.d)

    def __sub__(self, o):
        return _Dual(self.v - o.v, self.d - o.d)

    def __mul__(self, o):
        if isinstance(o, _Dual):
            return _Dual(self.v * o.v, self.d * o.v[..., None] + o.d * self.v[..., None])
        return _Dual(self.v * o, self.d * o)


def _sh_components(lmax: int, x, y, z, one, zero) -> list[list]:
    """Per-degree lists of Y_lm (m = -l..l) built with +, -, * only."""
    # cos/sin parts: Re, Im of (x + i y)^m
    re = [one]
    im = [zero]
    for m in range(1, lmax + 1):
        re.append(re[-1] * x - im[-1] * y)
        im.append(re[-2] * y + im[-1] * x)
    # q[l][m] = d^m/dz^m P_l(z) (associated Legendre without the sin^m factor)
    q = [[None] * (lmax + 1) for _ in range(lmax + 1)]
    for m in range(lmax + 1):
        dfact = float(np.prod(np.arange(2 * m - 1, 0, -2))) if m else 1.0
        q[m][m] = one * dfact
        if m + 1 <= lmax:
            q[m + 1][m] = z * ((2 * m + 1) * dfact)
        for l in range(m + 2, lmax + 1):
            q[l][m] = (z * q[l - 1][m] * (2 * l - 1) - q[l - 2][m] * (l + m - 1)) * (1.0 / (l - m))
    out = []
    for l in range(lmax + 1):
        out.append([q[l][abs(m)] * (im[-m] if m < 0 else re[m]) * _sh_norm(l, abs(m)) for m in range(-l, l + 1)])
    return out


def real_spherical_harmonics(lmax: int, direction, check_norm: bool = True) -> list:
    """Orthonormal real harmonics Y_lm for l = 0..lmax, without the Condon-Shortley phase.

    ``direction`` has shape (..., 3).  Each returned block has shape (..., 2l+1)
    ordered m = -l..l (negative m carry sin(|m| phi), positive m cos(m phi)).
    Works on numpy arrays and Tensors; for Tensors the whole expansion is one
    tape record whose Jacobian is carried alongside the values.
    """
    if lmax < 0:
        raise ValueError("lmax must be non-negative")
    is_t = isinstance(direction, Tensor)
    d = direction.data if is_t else np.asarray(direction, dtype=np.float64)
    if d.shape[-1] != 3:
        raise ValueError("directions must have a trailing axis of size 3")
    norms = np.linalg.norm(d, axis=-1)
    if np.any(norms == 0):
        raise ValueError("zero direction vector")
    if check_norm and np.any(np.abs(norms - 1.0) > 1e-8):
        raise ValueError("directions must be unit vectors")
    sizes = [2 * l + 1 for l in range(lmax + 1)]
    if not is_t:
        comps = _sh_components(lmax, d[..., 0], d[..., 1], d[..., 2], np.ones(d.shape[:-1]), np.zeros(d.shape[:-1]))
        return [np.stack(c, axis=-1) for c in comps]
    eye = np.eye(3, dtype=d.dtype)
    lead = d.shape[:-1]
    x, y, z = (_Dual(d[..., a], np.broadcast_to(eye[a], lead + (3,))) for a in range(3))
    zeros3 = np.zeros(lead + (3,), dtype=d.dtype)
    comps = _sh_components(lmax, x, y, z, _Dual(np.ones(lead, dtype=d.dtype), zeros3),
                           _Dual(np.zeros(lead, dtype=d.dtype), zeros3))
    flat = [c for block in comps for c in block]
    value = np.stack([c.v for c in flat], axis=-1)
    jac = np.stack([c.d for c in flat], axis=-2)
    full = dc.local_map(direction, value, jac)
    bounds = np.cumsum([0] + sizes)
    return [full[..., bounds[l]:bounds[l + 1]] for l in range(lmax + 1)]


def spherical_harmonics_flat(lmax: int, direction, check_norm: bool = True):
    blocks = real_spherical_harmonics(lmax, direction, check_norm)
    if isinstance(blocks[0], Tensor):
        return dc.concat(blocks, axis=-1)
    return np.concatenate(blocks, axis=-1)


@dataclass(frozen=True)
class DegreeAllocation:
    """How the d_h channels of one head are split across degrees 0..L."""

    repeats: tuple[int, ...]

    def __post_init__(self):
        if len(self.repeats) < 1 or min(self.repeats) < 0:
            raise ValueError("repeat counts must be non-negative, at least degree 0")
        if sum(self.repeats) < 1:
            raise ValueError("allocation must cover at least one channel")

    @classmethod
    def balanced(cls, head_dim: int, lmax: int = 3) -> "DegreeAllocation":
        base, rem = divmod(head_dim, lmax + 1)
        return cls(tuple(base + (1 if l < rem else 0) for l in range(lmax + 1)))

    @property
    def lmax(self) -> int:
        return len(self.repeats) - 1

    @property
    def head_dim(self) -> int:
        return int(sum(self.repeats))

    @property
    def expanded_dim(self) -> int:
        return int(sum(r * (2 * l + 1) for l, r in enumerate(self.repeats)))

    @property
    def expand_index(self) -> np.ndarray:
        """For each expanded slot, the head channel it copies."""
        idx = []
        c = 0
        for l, r in enumerate(self.repeats):
            for _ in range(r):
                idx.extend([c] * (2 * l + 1))
                c += 1
        return np.asarray(idx, dtype=np.int64)

    @property
    def code_index(self) -> np.ndarray:
        """For each expanded slot, the entry of the flat (l, m) harmonic vector it takes."""
        idx = []
        for l, r in enumerate(self.repeats):
            start = l * l
            for _ in range(r):
                idx.extend(range(start, start + 2 * l + 1))
        return np.asarray(idx, dtype=np.int64)

    @property
    def channel_degree(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.repeats)), self.repeats)


def build_lae_code(direction, alloc: DegreeAllocation, check_norm: bool = True):
    """gamma = r_l copies of Y_l(direction), concatenated over l; trailing size d_hr."""
    flat = spherical_harmonics_flat(alloc.lmax, direction, check_norm)
    if isinstance(flat, Tensor):
        return dc.gather(flat, alloc.code_index, axis=-1)
    return flat[..., alloc.code_index]


def self_token_code(alloc: DegreeAllocation, dtype=np.float64) -> np.ndarray:
    """Code for the self token: only degree-0 entries, set to Y_00."""
    code = np.zeros(alloc.expanded_dim, dtype=dtype)
    code[: alloc.repeats[0]] = 1.0 / math.sqrt(4 * math.pi)
    return code


def lae_expand_head(vec, alloc: DegreeAllocation):
    """Duplicate each head channel 2l+1 times according to its degree."""
    n = vec.shape[-1]
    if n != alloc.head_dim:
        raise ValueError(f"head vector has {n} channels, allocation expects {alloc.head_dim}")
    if isinstance(vec, Tensor):
        return dc.gather(vec, alloc.expand_index, axis=-1)
    return np.asarray(vec)[..., alloc.expand_index]


# ----------------------------------------------------------------- distance bias

@dataclass(frozen=True)
class FrequencyBank:
    num: int = 32
    omega_min: float = 2 * math.pi / 50.0
    omega_max: float = 2 * math.pi / 0.5
    frequencies: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num < 1 or self.omega_min <= 0 or self.omega_max < self.omega_min:
            raise ValueError("invalid frequency bank")
        if self.num == 1:
            f = np.array([self.omega_min])
        else:
            f = np.geomspace(self.omega_min, self.omega_max, self.num)
        object.__setattr__(self, "frequencies", f)


def sinc_kernel(r, bank: FrequencyBank | np.ndarray):
    """sin(w r)/(w r) for every frequency; value 1 at r = 0.  Trailing axis size M."""
    omega = bank.frequencies if isinstance(bank, FrequencyBank) else np.asarray(bank, dtype=np.float64)
    if not isinstance(r, Tensor):
        r = np.asarray(r, dtype=np.float64)
        x = r[..., None] * omega
        return np.sinc(x / np.pi)
    return dc.sinc(dc.mul(dc.reshape(r, r.shape + (1,)), omega.astype(r.dtype)))


def erope_bias(distances, weights, bank: FrequencyBank):
    """b[h, i, j] = sum_k weights[h, k] * sinc(omega_k r_ij).

    ``distances`` is (..., N, N) (numpy or Tensor); ``weights`` is (H, M).
    Returns (..., H, N, N).
    """
    dd = distances.data if isinstance(distances, Tensor) else np.asarray(distances)
    if np.any(dd < 0):
        raise ValueError("negative distance in bias input")
    s = sinc_kernel(distances, bank)
    if _is_tensor(s, weights):
        w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights))
        b = dc.matmul(s, dc.transpose(w, (1, 0)))
        nd = b.ndim
        axes = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
        return dc.transpose(b, axes)
    b = s @ np.asarray(weights).T
    return np.moveaxis(b, -1, -3)
