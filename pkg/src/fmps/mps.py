"""Matrix product states over spin-orbital chains.

Site tensors are arrays of shape ``(r_left, 2, r_right)``; the block for
occupation ``mu`` is ``A[:, mu, :]``. An :class:`Mps` stores the chain
``A_1 ... A_K`` together with a non-negative ``norm_factor`` so that the
amplitude of determinant ``mu_1 ... mu_K`` is
``norm_factor * A_1[mu_1] ... A_K[mu_K]``.

Two normal forms matter here. *Left* form: every site is left-normalized,
``sum_mu A[mu]^dagger A[mu] = 1``. *Closure* form: left form plus, at every
bond ``k``, the vector ``v_k = A_{k+1}[0] ... A_K[0]`` is a non-negative
multiple of the last unit vector ``e_last``. In closure form, contracting
the first ``k`` sites with ``e_last`` gives the normalized projection of the
state onto the Fock space of the first ``k`` orbitals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .fock import FockSector, StateVector, embed_full
from .kernel import _first_max, householder_to_last, svd

logger = logging.getLogger(__name__)

__all__ = [
    "MAX_DENSE_K",
    "RANK_RTOL",
    "ZERO_CLOSURE_TOL",
    "DenseTooLargeError",
    "GaugeError",
    "PairingError",
    "Mps",
    "ClosureVector",
    "SchmidtSpectrum",
    "SpatialSiteTensor",
    "from_dense",
    "to_dense",
    "check_left_normalized",
    "left_canonicalize",
    "schmidt_canonicalize",
    "closure_vector",
    "closure_norms",
    "fix_closure_gauge",
    "project_truncated",
    "schmidt_spectrum",
    "pair_spin",
    "paired_to_dense",
    "spatial_index_map",
    "truncate",
    "product_state",
    "random_mps",
]

MAX_DENSE_K = 24
# singular values at or below RANK_RTOL * sigma_max count as exact zeros
RANK_RTOL = 1e-14
# closure norms at or below this are treated as vanishing projections
ZERO_CLOSURE_TOL = 1e-13
LEFT_NORMAL_TOL = 1e-10


class DenseTooLargeError(ValueError):
    pass


class GaugeError(ValueError):
    """A normal-form precondition does not hold."""


class PairingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mps:
    """Chain of site tensors with a scalar norm factor.

    Attributes
    ----------
    sites : tuple of arrays ``(r_{k-1}, 2, r_k)``
    norm_factor : float
    canonical_form : ``"left"``, ``"closure"`` or ``"none"``
    discarded : per-bond discarded weight from the truncation that produced
        this chain (bond ``k`` at position ``k - 1``), or ``None``
    zero_closure : bonds whose closure vector vanishes (closure form only)
    """

    sites: tuple
    norm_factor: float = 1.0
    canonical_form: str = "none"
    discarded: Optional[tuple] = None
    zero_closure: tuple = field(default=())

    def __post_init__(self):
        sites = tuple(np.asarray(a) for a in self.sites)
        if not sites:
            raise ValueError("an Mps needs at least one site")
        if self.canonical_form not in ("left", "closure", "none"):
            raise ValueError(f"unknown canonical form {self.canonical_form!r}")
        if sites[0].shape[0] != 1 or sites[-1].shape[2] != 1:
            raise ValueError("boundary bond dimensions must be 1")
        for k, a in enumerate(sites):
            if a.ndim != 3 or a.shape[1] != 2:
                raise ValueError(f"site {k + 1} has shape {a.shape}, expected (r, 2, r')")
            if k and sites[k - 1].shape[2] != a.shape[0]:
                raise ValueError(f"bond {k} mismatch: {sites[k - 1].shape[2]} vs {a.shape[0]}")
        if not self.norm_factor >= 0:
            raise ValueError("norm_factor must be non-negative")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "norm_factor", float(self.norm_factor))

    @property
    def K(self) -> int:
        return len(self.sites)

    @property
    def bond_dims(self) -> tuple[int, ...]:
        """``(r_0, r_1, ..., r_K)``."""
        return (1,) + tuple(a.shape[2] for a in self.sites)

    @property
    def dtype(self):
        return np.result_type(*self.sites)

    def max_bond(self) -> int:
        return max(self.bond_dims)


@dataclass(frozen=True, eq=False)
class ClosureVector:
    k: int
    v: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.v))


@dataclass(frozen=True, eq=False)
class SchmidtSpectrum:
    """Non-increasing Schmidt values across bond ``k``."""

    k: int
    values: np.ndarray
    K: int
    D: Optional[int] = None

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True, eq=False)
class SpatialSiteTensor:
    """Paired site ``l``: blocks ``B[:, nu, :]`` for ``nu`` = empty, up, down, double."""

    l: int
    blocks: np.ndarray


def _check_dense_size(K: int) -> None:
    if K > MAX_DENSE_K:
        raise DenseTooLargeError(f"K={K} exceeds the dense limit {MAX_DENSE_K}; use DMRG instead")


def _keep_count(s: np.ndarray, D: Optional[int], rank_rtol: float) -> int:
    if s.size == 0 or s[0] == 0:
        return 1
    keep = int(np.count_nonzero(s > rank_rtol * s[0]))
    keep = max(keep, 1)
    if D is not None:
        keep = min(keep, D)
    return keep


def _left_svd_sweep(center: np.ndarray, rest: Sequence[np.ndarray], D: Optional[int],
                    rank_rtol: float, degenerate_rtol: Optional[float]):
    """Left-to-right SVD sweep.

    ``center`` is a ``(1, 2, r)`` tensor and ``rest`` are right-normalized
    sites (or, for a dense split, ``center`` holds the whole state and
    ``rest`` is empty). Returns the left-normalized sites, the discarded
    weights and the squared norm of the kept part relative to the input.
    """
    sites = []
    discarded = []
    kept_weight = 1.0
    rest = list(rest)
    total = len(rest) + 1
    for k in range(total - 1):
        rl = center.shape[0]
        mat = center.reshape(rl * 2, -1)
        u, s, vh = svd(mat, degenerate_rtol=degenerate_rtol)
        keep = _keep_count(s, D, rank_rtol)
        w_all = float(np.sum(s**2))
        w_keep = float(np.sum(s[:keep] ** 2))
        discarded.append(max(0.0, 1.0 - w_keep / w_all) if w_all > 0 else 0.0)
        kept_weight *= w_keep / w_all if w_all > 0 else 1.0
        sites.append(u[:, :keep].reshape(rl, 2, keep))
        carry = s[:keep, None] * vh[:keep]
        carry /= np.linalg.norm(carry)
        nxt = rest[k]
        center = np.tensordot(carry, nxt, axes=(1, 0))
    last = center.reshape(center.shape[0], 2, 1)
    nrm = np.linalg.norm(last)
    sites.append(last / nrm)
    return sites, discarded, kept_weight


def from_dense(state: StateVector, D: Optional[int] = None, rank_rtol: float = RANK_RTOL,
               degenerate_rtol: Optional[float] = None) -> Mps:
    """Exact (or, with ``D``, bond-capped) left-canonical factorization.

    Sector states are scattered into the full space first. The left bases
    are Schmidt bases in the kernel's deterministic phase gauge.
    """
    _check_dense_size(state.K)
    if state.K < 1:
        raise ValueError("need at least one orbital")
    if D is not None and D < 1:
        raise ValueError("D must be positive")
    full = embed_full(state)
    nrm = full.norm()
    if nrm == 0:
        raise ValueError("cannot factorize the zero state")
    K = state.K
    psi = (full.coeffs / nrm).reshape(1, 2, 1 << (K - 1)) if K > 1 else (full.coeffs / nrm).reshape(1, 2, 1)
    sites = []
    discarded = []
    center = psi
    for k in range(K - 1):
        rl = center.shape[0]
        mat = center.reshape(rl * 2, -1)
        u, s, vh = svd(mat, degenerate_rtol=degenerate_rtol)
        keep = _keep_count(s, D, rank_rtol)
        w_all = float(np.sum(s**2))
        discarded.append(max(0.0, 1.0 - float(np.sum(s[:keep] ** 2)) / w_all))
        sites.append(u[:, :keep].reshape(rl, 2, keep))
        carry = s[:keep, None] * vh[:keep]
        carry /= np.linalg.norm(carry)
        center = carry.reshape(keep, 2, -1)
    last = center.reshape(center.shape[0], 2, 1)
    sites.append(last / np.linalg.norm(last))
    return Mps(tuple(sites), nrm, "left", discarded=tuple(discarded) if D is not None else None)


def _contract_chain(sites: Sequence[np.ndarray]) -> np.ndarray:
    """``(2**k, r_k)`` matrix of products ``A_1[mu_1] ... A_k[mu_k]``."""
    m = sites[0].reshape(2, -1)
    for a in sites[1:]:
        m = (m @ a.reshape(a.shape[0], -1)).reshape(-1, a.shape[2])
    return m


def to_dense(mps: Mps) -> StateVector:
    """Coefficients ``norm_factor * A_1[mu_1] ... A_K[mu_K]`` over all labels."""
    _check_dense_size(mps.K)
    coeffs = mps.norm_factor * _contract_chain(mps.sites)[:, 0]
    return StateVector(FockSector(mps.K), coeffs)


def check_left_normalized(mps: Mps) -> np.ndarray:
    """Per-site ``max |sum_mu A[mu]^dagger A[mu] - 1|``."""
    out = np.empty(mps.K)
    for k, a in enumerate(mps.sites):
        m = a.reshape(-1, a.shape[2])
        out[k] = np.max(np.abs(m.conj().T @ m - np.eye(a.shape[2])))
    return out


def _require_left(mps: Mps, what: str) -> None:
    if mps.canonical_form == "none" or check_left_normalized(mps).max() > LEFT_NORMAL_TOL:
        raise GaugeError(f"{what} needs a left-canonical input")


def left_canonicalize(mps: Mps) -> Mps:
    """QR sweep into left form; the chain norm moves into ``norm_factor``."""
    sites = []
    carry = np.ones((1, 1))
    for a in mps.sites:
        a = np.tensordot(carry, a, axes=(1, 0))
        rl, _, rr = a.shape
        q, r = np.linalg.qr(a.reshape(rl * 2, rr))
        sites.append(q.reshape(rl, 2, q.shape[1]))
        carry = r
    scale = carry[0, 0]
    nrm = abs(scale)
    if nrm == 0:
        raise ValueError("the chain represents the zero state")
    sites[-1] = sites[-1] * (scale / nrm)
    return Mps(tuple(sites), mps.norm_factor * nrm, "left")


def _right_normalize(sites: Sequence[np.ndarray]):
    """LQ sweep from the right; returns (carry, right-normalized sites)."""
    out = []
    carry = np.ones((1, 1))
    for a in reversed(sites):
        a = np.tensordot(a, carry, axes=(2, 0))
        rl, _, rr = a.shape
        q, r = np.linalg.qr(a.reshape(rl, 2 * rr).T)
        out.append(q.T.reshape(q.shape[1], 2, rr))
        carry = r.T
    out.reverse()
    return carry, out


def schmidt_canonicalize(mps: Mps, rank_rtol: float = RANK_RTOL,
                         degenerate_rtol: Optional[float] = 1e-8) -> Mps:
    """Left form whose bond bases are Schmidt bases in a fixed gauge.

    This is the gauge ``from_dense`` produces, with the global phase fixed
    as well (largest entry of the last site real positive); applying it to
    chains from different solvers makes their tensors comparable. Schmidt
    values at or below ``rank_rtol * sigma_max`` are dropped.
    """
    base = left_canonicalize(mps) if mps.canonical_form == "none" else mps
    carry, right = _right_normalize(base.sites)
    first = np.tensordot(carry, right[0], axes=(1, 0))
    sites, _, kept = _left_svd_sweep(first, right[1:], None, rank_rtol, degenerate_rtol)
    last = sites[-1].ravel()
    j = _first_max(np.abs(last))
    if last[j] != 0:
        sites[-1] = sites[-1] * (abs(last[j]) / last[j])
    return Mps(tuple(sites), base.norm_factor * abs(carry[0, 0]) * np.sqrt(kept), "left")


def closure_vector(mps: Mps, k: int) -> ClosureVector:
    """``v_k = A_{k+1}[0] ... A_K[0]`` for ``0 <= k < K`` (``v_K = (1)``)."""
    if not 0 <= k <= mps.K:
        raise IndexError(f"bond {k} outside [0, {mps.K}]")
    v = np.ones(1, dtype=mps.dtype)
    for a in reversed(mps.sites[k:]):
        v = a[:, 0, :] @ v
    return ClosureVector(k, v)


def closure_norms(mps: Mps) -> np.ndarray:
    """``|v_k|`` for ``k = 0 ... K``."""
    out = np.empty(mps.K + 1)
    v = np.ones(1, dtype=mps.dtype)
    out[mps.K] = 1.0
    for k in range(mps.K - 1, -1, -1):
        v = mps.sites[k][:, 0, :] @ v
        out[k] = np.linalg.norm(v)
    return out


def fix_closure_gauge(mps: Mps) -> Mps:
    """Rotate every bond so its closure vector points along ``e_last``.

    Bonds are fixed right to left: the rotation at bond ``k`` changes
    ``v_{k-1}`` but leaves ``v_{k+1}`` alone. Bonds whose closure norm is
    at or below ``ZERO_CLOSURE_TOL`` count as vanishing projections: they
    keep the identity gauge (a rounding-noise direction would make the
    gauge irreproducible) and are listed in ``zero_closure``.
    """
    _require_left(mps, "fix_closure_gauge")
    sites = list(mps.sites)
    zero = []
    v = np.ones(1, dtype=mps.dtype)
    for k in range(mps.K - 1, 0, -1):
        # v_k from the already-gauged site k+1 (0-based index k)
        v = sites[k][:, 0, :] @ v
        nv = np.linalg.norm(v)
        if nv <= ZERO_CLOSURE_TOL:
            zero.append(k)
            continue
        q = householder_to_last(v)
        sites[k - 1] = np.tensordot(sites[k - 1], q, axes=(2, 0))
        sites[k] = np.tensordot(q.conj().T, sites[k], axes=(1, 0))
        v = np.zeros_like(v, dtype=np.result_type(v, q))
        v[-1] = nv
    return replace(mps, sites=tuple(sites), canonical_form="closure", zero_closure=tuple(sorted(zero)))


def project_truncated(mps: Mps, k: int) -> StateVector:
    """Normalized projection onto the Fock space of the first ``k`` orbitals.

    Contracts ``A_1 ... A_k`` with ``e_last``; returns the zero vector when
    the projection vanishes.
    """
    if mps.canonical_form != "closure":
        raise GaugeError("project_truncated needs a chain in closure gauge")
    if not 1 <= k <= mps.K:
        raise IndexError(f"bond {k} outside [1, {mps.K}]")
    _check_dense_size(k)
    sector = FockSector(k)
    if closure_vector(mps, k).norm <= ZERO_CLOSURE_TOL:
        return StateVector(sector, np.zeros(1 << k, dtype=mps.dtype))
    return StateVector(sector, _contract_chain(mps.sites[:k])[:, -1])


def schmidt_spectrum(mps: Mps, k: int, D: Optional[int] = None, rank_rtol: float = RANK_RTOL) -> SchmidtSpectrum:
    """Singular values across the bond between sites ``k`` and ``k + 1``.

    Sites ``k+1 ... K`` are right-orthogonalized and the resulting bond
    matrix is diagonalized. Values are scaled to unit squared sum.
    """
    if not 1 <= k < mps.K:
        raise IndexError(f"bond {k} outside [1, {mps.K - 1}]")
    base = mps if mps.canonical_form != "none" else left_canonicalize(mps)
    carry, _ = _right_normalize(base.sites[k:])
    s = np.linalg.svd(carry, compute_uv=False)
    s = s[: _keep_count(s, None, rank_rtol)] if s[0] > 0 else s[:1]
    s = s / np.linalg.norm(s)
    return SchmidtSpectrum(k, s, mps.K, D if D is not None else mps.max_bond())


def pair_spin(mps: Mps) -> list[SpatialSiteTensor]:
    """Merge spin-orbital pairs ``(2l-1, 2l)`` into spatial sites.

    ``nu = mu_{2l-1} + 2 mu_{2l}``: 0 empty, 1 up, 2 down, 3 double.
    """
    if mps.K % 2:
        raise PairingError(f"spin pairing needs an even number of spin orbitals, got K={mps.K}")
    out = []
    for l in range(mps.K // 2):
        a, b = mps.sites[2 * l], mps.sites[2 * l + 1]
        t = np.einsum("aib,bjc->ajic", a, b)
        out.append(SpatialSiteTensor(l + 1, t.reshape(a.shape[0], 4, b.shape[2])))
    return out


def paired_to_dense(blocks: Sequence[SpatialSiteTensor], norm_factor: float = 1.0) -> np.ndarray:
    """Coefficients over ``nu_1 ... nu_L`` (``nu_1`` most significant, base 4)."""
    _check_dense_size(2 * len(blocks))
    m = blocks[0].blocks.reshape(4, -1)
    for b in blocks[1:]:
        t = b.blocks
        m = (m @ t.reshape(t.shape[0], -1)).reshape(-1, t.shape[2])
    return norm_factor * m[:, 0]


def spatial_index_map(L: int) -> np.ndarray:
    """Full-space spin-orbital label index for each ``nu`` string index."""
    idx = np.zeros(1, dtype=np.int64)
    for _ in range(L):
        nu = np.arange(4)
        pair = ((nu & 1) << 1) | (nu >> 1)
        idx = (idx[:, None] * 4 + pair[None, :]).ravel()
    return idx


def truncate(mps: Mps, D: int, rank_rtol: float = RANK_RTOL) -> tuple[Mps, np.ndarray]:
    """Cap every bond at ``D`` by SVD truncation.

    Returns the re-left-normalized chain (same ``norm_factor``, Schmidt-basis
    gauge) and the discarded weight at bonds ``1 ... K-1``.
    """
    if D < 1:
        raise ValueError("D must be positive")
    base = mps if mps.canonical_form != "none" else left_canonicalize(mps)
    sites = list(base.sites)
    discarded = np.zeros(max(base.K - 1, 0))
    carry = np.ones((1, 1))
    for k in range(base.K - 1, 0, -1):
        a = np.tensordot(sites[k], carry, axes=(2, 0))
        rl, _, rr = a.shape
        u, s, vh = svd(a.reshape(rl, 2 * rr))
        keep = _keep_count(s, D, rank_rtol)
        w_all = float(np.sum(s**2))
        discarded[k - 1] = max(0.0, 1.0 - float(np.sum(s[:keep] ** 2)) / w_all) if w_all > 0 else 0.0
        sites[k] = vh[:keep].reshape(keep, 2, rr)
        carry = u[:, :keep] * s[:keep]
    first = np.tensordot(sites[0], carry, axes=(2, 0))
    first /= np.linalg.norm(first)
    new_sites, _, _ = _left_svd_sweep(first, sites[1:], None, rank_rtol, None)
    return Mps(tuple(new_sites), base.norm_factor, "left", discarded=tuple(discarded)), discarded


def product_state(bits: str) -> Mps:
    """Bond-dimension-1 chain for a single determinant."""
    sites = []
    for b in bits:
        a = np.zeros((1, 2, 1))
        a[0, int(b), 0] = 1.0
        sites.append(a)
    return Mps(tuple(sites), 1.0, "left")


def random_mps(K: int, D: int, rng: np.random.Generator, dtype=float) -> Mps:
    """Random chain with bonds ``min(2**k, 2**(K-k), D)``, unnormalized gauge."""
    dims = [1] + [min(2**k, 2 ** (K - k), D) for k in range(1, K)] + [1]
    sites = []
    for k in range(K):
        a = rng.standard_normal((dims[k], 2, dims[k + 1]))
        if np.dtype(dtype).kind == "c":
            a = a + 1j * rng.standard_normal(a.shape)
        sites.append(a)
    return Mps(tuple(sites), 1.0, "none")
