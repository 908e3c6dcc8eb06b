"""Matrix product operators and two-site DMRG.

MPO site tensors have shape ``(w_left, w_right, 2, 2)`` with the physical
indices ordered (out, in). Fermionic signs enter through Jordan-Wigner
strings: ``a_i = Z_1 ... Z_{i-1} sigma_i`` with ``Z = diag(1, -1)``.
"""

from __future__ import annotations

import bisect
import itertools
import logging
from dataclasses import dataclass, field
from math import comb
from typing import Optional, Sequence

import numpy as np

from .fock import FockSector
from .hamiltonian import IntegralTable, spin_orbital_integrals
from .kernel import ConvergenceError, lanczos_smallest, svd
from .mps import Mps, left_canonicalize, random_mps

logger = logging.getLogger(__name__)

__all__ = [
    "Mpo",
    "SweepConfig",
    "DmrgResult",
    "mpo_from_terms",
    "mpo_from_integrals",
    "sector_penalty_mpo",
    "mpo_to_dense",
    "mpo_expectation",
    "compress_mpo",
    "dmrg_ground_state",
]

_CREATE = np.array([[0.0, 0.0], [1.0, 0.0]])
_ANNIHILATE = np.array([[0.0, 1.0], [0.0, 0.0]])
_Z = np.diag([1.0, -1.0])
_IDENTITY = np.eye(2)


@dataclass(frozen=True, eq=False)
class Mpo:
    tensors: tuple
    energy_scale: float = 1.0

    def __post_init__(self):
        tensors = tuple(np.asarray(w) for w in self.tensors)
        if tensors[0].shape[0] != 1 or tensors[-1].shape[1] != 1:
            raise ValueError("MPO boundary bonds must be 1")
        for k in range(1, len(tensors)):
            if tensors[k - 1].shape[1] != tensors[k].shape[0]:
                raise ValueError(f"MPO bond {k} mismatch")
        object.__setattr__(self, "tensors", tensors)

    @property
    def K(self) -> int:
        return len(self.tensors)

    @property
    def bond_dims(self) -> tuple[int, ...]:
        return (1,) + tuple(w.shape[1] for w in self.tensors)

    def __add__(self, other: "Mpo") -> "Mpo":
        if other.K != self.K:
            raise ValueError("cannot add MPOs of different length")
        out = []
        for k, (a, b) in enumerate(zip(self.tensors, other.tensors)):
            la = 1 if k == 0 else a.shape[0] + b.shape[0]
            ra = 1 if k == self.K - 1 else a.shape[1] + b.shape[1]
            w = np.zeros((la, ra, 2, 2), dtype=np.result_type(a, b))
            if k == 0 and k == self.K - 1:
                w[...] = a + b
            elif k == 0:
                w[:, : a.shape[1]] = a
                w[:, a.shape[1]:] = b
            elif k == self.K - 1:
                w[: a.shape[0]] = a
                w[a.shape[0]:] = b
            else:
                w[: a.shape[0], : a.shape[1]] = a
                w[a.shape[0]:, a.shape[1]:] = b
            out.append(w)
        return Mpo(tuple(out), max(self.energy_scale, other.energy_scale))


@dataclass(frozen=True)
class SweepConfig:
    """DMRG controls.

    ``D_schedule`` gives the bond cap per sweep; its last entry applies to
    all later sweeps. ``trunc_floor`` drops a Schmidt tail whose total weight
    lies below it even when the cap would allow keeping it. During the
    first ``expand_sweeps`` sweeps, bond slots left free by the truncation
    are filled with Hamiltonian-generated directions (see
    :func:`_split_expanded`); convergence is only declared after them.
    """

    D_schedule: tuple = (16,)
    tol: float = 1e-10
    max_sweeps: int = 30
    trunc_floor: float = 1e-15
    local_tol: tuple = (1e-4, 1e-6, 1e-8, 1e-10)
    penalty: Optional[float] = None
    expand_sweeps: int = 4

    def __post_init__(self):
        sched = tuple(int(d) for d in self.D_schedule)
        if not sched or min(sched) < 1:
            raise ValueError("D_schedule needs positive entries")
        if any(b < a for a, b in zip(sched, sched[1:])):
            raise ValueError("D_schedule must be non-decreasing")
        object.__setattr__(self, "D_schedule", sched)
        if self.expand_sweeps < 0:
            raise ValueError("expand_sweeps must be non-negative")

    @classmethod
    def ramp(cls, D: int, **kwargs) -> "SweepConfig":
        """Schedule doubling from ``min(D, 8)`` up to ``D``."""
        sched = [min(D, 8)]
        while sched[-1] < D:
            sched.append(min(2 * sched[-1], D))
        return cls(D_schedule=tuple(sched), **kwargs)

    def D_at(self, sweep: int) -> int:
        return self.D_schedule[min(sweep, len(self.D_schedule) - 1)]

    def local_tol_at(self, sweep: int) -> float:
        return self.local_tol[min(sweep, len(self.local_tol) - 1)]


@dataclass(frozen=True, eq=False)
class DmrgResult:
    mps: Mps
    energy: float
    energies: tuple
    truncated_weights: tuple
    converged: bool
    penalty_energy: float = 0.0
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------- MPO construction

class _LocalOps:
    """Registry of distinct 2x2 local operators."""

    def __init__(self):
        self.mats: list[np.ndarray] = []
        self.index: dict[bytes, int] = {}
        self.cache: dict[tuple, int] = {}

    def add(self, m: np.ndarray) -> int:
        key = np.round(m, 12).tobytes()
        if key not in self.index:
            self.index[key] = len(self.mats)
            self.mats.append(m)
        return self.index[key]

    def local(self, types: tuple, odd_after: bool) -> Optional[int]:
        key = (types, odd_after)
        if key not in self.cache:
            m = _IDENTITY
            for t in types:
                m = m @ (_CREATE if t == "c" else _ANNIHILATE)
            if odd_after:
                m = m @ _Z
            self.cache[key] = None if not np.any(m) else self.add(m)
        return self.cache[key]


def _sorted_ops(ops: Sequence[tuple[int, str]]) -> tuple[tuple, int]:
    """Stable sort by site; sign from swapping operators on different sites."""
    ops = list(ops)
    sign = 1
    for i in range(1, len(ops)):
        j = i
        while j > 0 and ops[j - 1][0] > ops[j][0]:
            ops[j - 1], ops[j] = ops[j], ops[j - 1]
            sign = -sign
            j -= 1
    return tuple(ops), sign


def mpo_from_terms(terms: dict, K: int, energy_scale: float = 1.0, compress_tol: float = 1e-12) -> Mpo:
    """Exact MPO for a sum of fermionic operator products.

    ``terms`` maps tuples of ``(site, "c" | "a")`` (0-based sites, product
    order as written) to coefficients. Each term follows a path of
    automaton states: at bond ``b`` it is labelled by its left part while
    fewer operators lie left of ``b`` than right of it (ties broken at the
    chain center), and by its right part afterwards. The coefficient sits on
    the single transition where the label switches sides. The result is
    SVD-compressed at relative tolerance ``compress_tol``.
    """
    merged: dict[tuple, float] = {}
    for ops, coef in terms.items():
        if coef == 0:
            continue
        sops, sign = _sorted_ops(ops)
        merged[sops] = merged.get(sops, 0.0) + sign * coef
    registry = _LocalOps()
    registry.add(_IDENTITY)
    states = [dict() for _ in range(K + 1)]
    entries = [dict() for _ in range(K)]
    half = K // 2
    for ops, coef in merged.items():
        if abs(coef) < 1e-15:
            continue
        sites = [s for s, _ in ops]
        n = len(ops)
        locals_ = []
        dead = False
        for j in range(K):
            lo = bisect.bisect_left(sites, j)
            hi = bisect.bisect_right(sites, j)
            lid = registry.local(tuple(t for _, t in ops[lo:hi]), (n - hi) % 2 == 1)
            if lid is None:
                dead = True
                break
            locals_.append(lid)
        if dead:
            continue
        prev_idx = prev_prefix = None
        for b in range(K + 1):
            nl = bisect.bisect_left(sites, b)
            nr = n - nl
            prefix = nl < nr or (nl == nr and b <= half)
            key = ("P", ops[:nl], nr % 2) if prefix else ("S", ops[nl:])
            idx = states[b].setdefault(key, len(states[b]))
            if b:
                ekey = (prev_idx, idx, locals_[b - 1])
                if prev_prefix and not prefix:
                    entries[b - 1][ekey] = entries[b - 1].get(ekey, 0.0) + coef
                else:
                    entries[b - 1][ekey] = 1.0
            prev_idx, prev_prefix = idx, prefix
    mats = np.array(registry.mats)
    tensors = []
    for j in range(K):
        w = np.zeros((max(len(states[j]), 1), max(len(states[j + 1]), 1), 2, 2))
        for (l, r, op), val in entries[j].items():
            w[l, r] += val * mats[op]
        tensors.append(w)
    mpo = Mpo(tuple(tensors), energy_scale)
    return compress_mpo(mpo, compress_tol) if compress_tol else mpo


def _integral_terms(table: IntegralTable, K: int) -> dict:
    h, G = spin_orbital_integrals(table, K)
    terms: dict[tuple, float] = {}
    if table.e_core:
        terms[()] = float(table.e_core)
    for i, j in zip(*np.nonzero(h)):
        terms[((i, "c"), (j, "a"))] = float(h[i, j])
    for i, j, k, l in zip(*np.nonzero(G)):
        if i == k or j == l:
            continue
        key = ((i, "c"), (k, "c"), (l, "a"), (j, "a"))
        terms[key] = terms.get(key, 0.0) + 0.5 * float(G[i, j, k, l])
    return terms


def mpo_from_integrals(table: IntegralTable, K: int, compress_tol: float = 1e-12) -> Mpo:
    """MPO of the electronic Hamiltonian on the first ``K`` spin orbitals."""
    if K % 2 or K // 2 > table.n_orb:
        raise ValueError(f"K={K} must be even and at most {2 * table.n_orb}")
    if np.iscomplexobj(table.h) or np.iscomplexobj(table.V):
        raise NotImplementedError("complex integrals are not supported")
    return mpo_from_terms(_integral_terms(table, K), K, table.energy_scale(), compress_tol)


def sector_penalty_mpo(K: int, N: Optional[int], two_sz: Optional[int], weight: float) -> Mpo:
    """``weight * ((N_op - N)^2 + (Sz_op - Sz)^2)``; either part may be omitted."""
    n_coef = np.zeros((K, K))
    lin = np.zeros(K)
    const = 0.0
    spin = np.array([0.5 if i % 2 == 0 else -0.5 for i in range(K)])
    if N is not None:
        n_coef += 1.0
        lin -= 2.0 * N
        const += float(N) ** 2
    if two_sz is not None:
        sz = two_sz / 2.0
        n_coef += np.outer(spin, spin)
        lin -= 2.0 * sz * spin
        const += sz**2
    terms: dict[tuple, float] = {}
    if const:
        terms[()] = weight * const
    for i in range(K):
        for j in range(K):
            if n_coef[i, j]:
                terms[((i, "c"), (i, "a"), (j, "c"), (j, "a"))] = weight * n_coef[i, j]
        if lin[i]:
            terms[((i, "c"), (i, "a"))] = terms.get(((i, "c"), (i, "a")), 0.0) + weight * lin[i]
    return mpo_from_terms(terms, K, abs(weight))


def compress_mpo(mpo: Mpo, tol: float = 1e-12) -> Mpo:
    """Two SVD sweeps dropping operator-Schmidt values below ``tol * s_max``."""
    tensors = [w.copy() for w in mpo.tensors]
    K = len(tensors)
    for j in range(K - 1):
        wl, wr, d1, d2 = tensors[j].shape
        m = tensors[j].transpose(0, 2, 3, 1).reshape(wl * d1 * d2, wr)
        u, s, vh = svd(m)
        keep = max(1, int(np.count_nonzero(s > tol * s[0]))) if s.size and s[0] > 0 else 1
        tensors[j] = u[:, :keep].reshape(wl, d1, d2, keep).transpose(0, 3, 1, 2)
        tensors[j + 1] = np.tensordot(s[:keep, None] * vh[:keep], tensors[j + 1], axes=(1, 0))
    for j in range(K - 1, 0, -1):
        wl, wr, d1, d2 = tensors[j].shape
        m = tensors[j].reshape(wl, wr * d1 * d2)
        u, s, vh = svd(m)
        keep = max(1, int(np.count_nonzero(s > tol * s[0]))) if s.size and s[0] > 0 else 1
        tensors[j] = vh[:keep].reshape(keep, wr, d1, d2)
        tensors[j - 1] = np.tensordot(tensors[j - 1], u[:, :keep] * s[:keep], axes=(1, 0)).transpose(0, 3, 1, 2)
    return Mpo(tuple(tensors), mpo.energy_scale)


def mpo_to_dense(mpo: Mpo) -> np.ndarray:
    """Full ``2**K x 2**K`` matrix in the occupation-label order (small K only)."""
    if mpo.K > 12:
        raise ValueError("dense MPO expansion is limited to K <= 12")
    m = mpo.tensors[0][0]  # (wr, o, i)
    for w in mpo.tensors[1:]:
        # m: (wr, O, I) with O, I multi-indices
        m = np.einsum("aOI,abij->bOiIj", m, w)
        b, O, i, I, j = m.shape
        m = m.reshape(b, O * i, I * j)
    return m[0]


def mpo_expectation(sites: Sequence[np.ndarray], mpo: Mpo) -> float:
    """``<psi|H|psi> / <psi|psi>`` for a chain of site tensors."""
    env = np.ones((1, 1, 1))
    nrm = np.ones((1, 1))
    for a, w in zip(sites, mpo.tensors):
        env = _grow_left(env, a, w)
        nrm = np.tensordot(np.tensordot(nrm, a, axes=(1, 0)), a.conj(), axes=([0, 1], [0, 1]))
    return float(np.real(env[0, 0, 0] / nrm[0, 0]))


# ---------------------------------------------------------------- DMRG engine

def _grow_left(L: np.ndarray, A: np.ndarray, W: np.ndarray) -> np.ndarray:
    t = np.tensordot(L, A, axes=(2, 0))                      # (a, w, i, b')
    t = np.tensordot(t, W, axes=([1, 2], [0, 3]))            # (a, b', w', o)
    t = np.tensordot(A.conj(), t, axes=([0, 1], [0, 3]))     # (b, b', w')
    return t.transpose(0, 2, 1)


def _grow_right(R: np.ndarray, B: np.ndarray, W: np.ndarray) -> np.ndarray:
    t = np.tensordot(B, R, axes=(2, 2))                      # (a', i, b, w')
    t = np.tensordot(t, W, axes=([1, 3], [3, 1]))            # (a', b, w, o)
    t = np.tensordot(B.conj(), t, axes=([1, 2], [3, 1]))     # (a, a', w)
    return t.transpose(0, 2, 1)


def _two_site_matvec(L, W1, W2, R, shape):
    def apply(x):
        t = x.reshape(shape)
        y = np.tensordot(L, t, axes=(2, 0))
        y = np.tensordot(y, W1, axes=([1, 2], [0, 3]))
        y = np.tensordot(y, W2, axes=([3, 1], [0, 3]))
        y = np.tensordot(y, R, axes=([1, 3], [2, 1]))
        return y.reshape(-1)
    return apply


def _split(theta: np.ndarray, D: int, floor: float):
    rl, _, _, rr = theta.shape
    u, s, vh = svd(theta.reshape(rl * 2, 2 * rr))
    keep = max(1, int(np.count_nonzero(s > 1e-14 * s[0]))) if s[0] > 0 else 1
    keep = min(keep, D)
    w = s**2 / np.sum(s**2)
    tail = np.cumsum(w[::-1])[::-1]  # tail[i] = weight of values i..end
    while keep > 1 and tail[keep - 1] < floor:
        keep -= 1
    discarded = float(max(0.0, 1.0 - np.sum(w[:keep])))
    s_kept = s[:keep] / np.linalg.norm(s[:keep])
    return u[:, :keep].reshape(rl, 2, keep), s_kept, vh[:keep].reshape(keep, 2, rr), discarded


def dmrg_ground_state(mpo: Mpo, sector: Optional[FockSector], config: SweepConfig = SweepConfig(),
                      seed: int = 0) -> DmrgResult:
    """Two-site DMRG for the ground state of ``mpo``.

    With a sector, the target particle number and spin projection are
    enforced by adding ``penalty * ((N - N0)^2 + (Sz - Sz0)^2)`` to the
    Hamiltonian, ``penalty`` defaulting to ten times the MPO energy scale.
    The returned chain is left-canonical and normalized; ``energy`` is
    the expectation of the bare ``mpo``.
    """
    K = mpo.K
    work = mpo
    if sector is not None and (sector.N is not None or sector.two_sz is not None):
        if sector.K != K:
            raise ValueError(f"sector has K={sector.K}, MPO has K={K}")
        lam = config.penalty if config.penalty is not None else 10.0 * abs(mpo.energy_scale)
        work = compress_mpo(mpo + sector_penalty_mpo(K, sector.N, sector.two_sz, lam))
    rng = np.random.default_rng(seed)
    d_init = min(config.D_at(0), 8)
    init = _random_sector_sites(sector, d_init, rng) if sector is not None else None
    if init is None:
        init = random_mps(K, d_init, rng).sites
    elif d_init > 1:
        # add the lowest one-body determinant so weakly coupled orbitals start filled
        bits = _aufbau_bits(mpo, sector)
        if bits is not None:
            init = _direct_sum(_right_canonical(init), [np.eye(2)[int(b)].reshape(1, 2, 1) for b in bits])
    sites = _right_canonical(init)
    Ws = work.tensors
    L_env = [None] * (K + 1)
    R_env = [None] * (K + 1)
    L_env[0] = np.ones((1, 1, 1))
    R_env[K] = np.ones((1, 1, 1))
    for j in range(K - 1, 0, -1):
        R_env[j] = _grow_right(R_env[j + 1], sites[j], Ws[j])

    energies = []
    truncations = []
    lanczos_failures = 0
    converged = False
    if K == 1:
        # single site: diagonalize the 2x2 operator directly
        h = Ws[0][0, 0]
        w, v = np.linalg.eigh(h)
        sites = [v[:, 0].reshape(1, 2, 1)]
        energies.append(float(w[0]))
        converged = True
    sweep = 0
    while not converged and sweep < config.max_sweeps:
        D = config.D_at(sweep)
        tol = config.local_tol_at(sweep)
        expand = sweep < config.expand_sweeps
        disc = np.zeros(K - 1)
        # left-to-right half sweep
        for j in range(K - 1):
            sites, e, d, fail = _optimize_pair(sites, j, L_env, R_env, Ws, D, tol, config.trunc_floor, expand, right=True)
            lanczos_failures += fail
            if j < K - 2:
                L_env[j + 1] = _grow_left(L_env[j], sites[j], Ws[j])
        for j in range(K - 2, -1, -1):
            sites, e, d, fail = _optimize_pair(sites, j, L_env, R_env, Ws, D, tol, config.trunc_floor, expand, right=False)
            lanczos_failures += fail
            disc[j] = d
            R_env[j + 1] = _grow_right(R_env[j + 2], sites[j + 1], Ws[j + 1])
        energies.append(mpo_expectation(sites, work))
        truncations.append(disc)
        if (sweep + 1 >= len(config.D_schedule) and len(energies) > 1
                and abs(energies[-1] - energies[-2]) < config.tol
                and sweep + 1 >= len(config.local_tol) and sweep >= config.expand_sweeps):
            converged = True
        sweep += 1
    final = left_canonicalize(Mps(tuple(sites), 1.0, "none"))
    final = Mps(final.sites, 1.0, "left")
    energy = mpo_expectation(final.sites, mpo)
    pen = energies[-1] - energy if work is not mpo else 0.0
    if not converged:
        logger.warning("DMRG stopped after %d sweeps without converging (last dE %.2e)", sweep,
                       abs(energies[-1] - energies[-2]) if len(energies) > 1 else np.nan)
    return DmrgResult(final, energy, tuple(energies), tuple(truncations), converged, pen,
                      {"sweeps": sweep, "lanczos_failures": lanczos_failures,
                       "mpo_bond_dims": work.bond_dims})


def _sector_counts(sector: FockSector) -> Optional[tuple]:
    """Target ``(n_up, n_dn)`` (or ``(n,)``) and the per-site charge map."""
    K = sector.K
    if sector.N is None:
        return None
    if sector.two_sz is None:
        return (sector.N,), [lambda mu: (mu,)] * K, [(1,)] * K
    n_up = (sector.N + sector.two_sz) // 2
    up = lambda mu: (mu, 0)
    dn = lambda mu: (0, mu)
    charge = [up if k % 2 == 0 else dn for k in range(K)]
    cap = [(1, 0) if k % 2 == 0 else (0, 1) for k in range(K)]
    return (n_up, sector.N - n_up), charge, cap


def _random_sector_sites(sector: FockSector, D: int, rng: np.random.Generator) -> Optional[list]:
    """Seeded random chain supported entirely inside ``sector``.

    Each bond carries definite left charges; when more charges are
    feasible than ``D`` allows, those with the largest number of sector
    determinants passing through them are kept.
    """
    spec = _sector_counts(sector)
    if spec is None:
        return None
    target, charge, cap = spec
    K = sector.K
    n = len(target)
    before = [tuple(sum(c[i] for c in cap[:k]) for i in range(n)) for k in range(K + 1)]
    after = [tuple(before[K][i] - before[k][i] for i in range(n)) for k in range(K + 1)]

    def weight(k, q):
        return np.prod([comb(before[k][i], q[i]) * comb(after[k][i], target[i] - q[i]) for i in range(n)])

    bonds = [[tuple([0] * n)]]
    for k in range(1, K):
        feas = [q for q in itertools.product(*[range(t + 1) for t in target])
                if weight(k, q) > 0]
        feas.sort(key=lambda q: (-weight(k, q), q))
        bonds.append(feas[:D])
    bonds.append([tuple(target)])
    # drop states without a predecessor or successor, until stable
    changed = True
    while changed:
        changed = False
        for k in range(1, K):
            keep = [q for q in bonds[k]
                    if any(tuple(p[i] + charge[k - 1](mu)[i] for i in range(n)) == q
                           for p in bonds[k - 1] for mu in (0, 1))
                    and any(tuple(q[i] + charge[k](mu)[i] for i in range(n)) == r
                            for r in bonds[k + 1] for mu in (0, 1))]
            if len(keep) != len(bonds[k]):
                bonds[k] = keep
                changed = True
    if any(not b for b in bonds):
        return None
    sites = []
    for k in range(K):
        a = np.zeros((len(bonds[k]), 2, len(bonds[k + 1])))
        for x, p in enumerate(bonds[k]):
            for mu in (0, 1):
                q = tuple(p[i] + charge[k](mu)[i] for i in range(n))
                for y, r in enumerate(bonds[k + 1]):
                    if r == q:
                        a[x, mu, y] = rng.standard_normal()
        sites.append(a)
    return sites


def _aufbau_bits(mpo: Mpo, sector: FockSector) -> Optional[str]:
    """Determinant filling the orbitals of lowest diagonal one-body energy."""
    spec = _sector_counts(sector)
    if spec is None:
        return None
    K = mpo.K
    vac = [np.eye(2)[0].reshape(1, 2, 1)] * K
    e0 = mpo_expectation(vac, mpo)
    eps = []
    for i in range(K):
        s = list(vac)
        s[i] = np.eye(2)[1].reshape(1, 2, 1)
        eps.append(mpo_expectation(s, mpo) - e0)
    target = spec[0]
    groups = [range(K)] if len(target) == 1 else [range(0, K, 2), range(1, K, 2)]
    occ = np.zeros(K, dtype=int)
    for n, g in zip(target, groups):
        order = sorted(g, key=lambda i: (eps[i], i))
        occ[order[:n]] = 1
    return "".join(str(b) for b in occ)


def _direct_sum(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> list:
    """Site tensors of the superposition of two chains."""
    K = len(a)
    out = []
    for k, (x, y) in enumerate(zip(a, b)):
        if K == 1:
            out.append(x + y)
        elif k == 0:
            out.append(np.concatenate([x, y], axis=2))
        elif k == K - 1:
            out.append(np.concatenate([x, y], axis=0))
        else:
            z = np.zeros((x.shape[0] + y.shape[0], 2, x.shape[2] + y.shape[2]), dtype=np.result_type(x, y))
            z[: x.shape[0], :, : x.shape[2]] = x
            z[x.shape[0]:, :, x.shape[2]:] = y
            out.append(z)
    return out


def _right_canonical(sites: Sequence[np.ndarray]) -> list:
    out = []
    carry = np.ones((1, 1))
    for a in reversed(sites):
        a = np.tensordot(a, carry, axes=(2, 0))
        rl, _, rr = a.shape
        q, r = np.linalg.qr(a.reshape(rl, 2 * rr).T)
        out.append(q.T.reshape(q.shape[1], 2, rr))
        carry = r.T
    out.reverse()
    # the leftover scalar only rescales the state
    out[0] = out[0] * np.sign(carry[0, 0] if carry[0, 0] != 0 else 1.0)
    return out


def _optimize_pair(sites, j, L_env, R_env, Ws, D, tol, floor, expand, right: bool):
    a, b = sites[j], sites[j + 1]
    theta = np.tensordot(a, b, axes=(2, 0))
    shape = theta.shape
    apply = _two_site_matvec(L_env[j], Ws[j], Ws[j + 1], R_env[j + 2], shape)
    fail = 0
    try:
        e, vec = lanczos_smallest(apply, theta.size, tol=tol, v0=theta.ravel(),
                                  krylov_dim=min(theta.size, 48), max_iter=4000)
    except ConvergenceError as exc:
        e, vec = exc.eigenvalue, exc.eigenvector
        fail = 1
    theta = vec.reshape(shape)
    sites = list(sites)
    if expand:
        left, right_t, disc = _split_expanded(theta, L_env[j], Ws[j], Ws[j + 1], R_env[j + 2], D, floor, right)
        sites[j], sites[j + 1] = left, right_t
        return sites, e, disc, fail
    u, s, vh, disc = _split(theta, D, floor)
    if right:
        sites[j] = u
        sites[j + 1] = s[:, None, None] * vh
    else:
        sites[j] = u * s[None, None, :]
        sites[j + 1] = vh
    return sites, e, disc, fail


def _split_expanded(theta, L, W1, W2, R, D, floor, right: bool):
    """Truncating split that fills spare bond slots with perturbation directions.

    The state's own Schmidt vectors are kept exactly as in :func:`_split`;
    when fewer than ``D`` survive, the free slots receive the dominant
    directions of the half-contracted Hamiltonian applied to ``theta``,
    orthogonal to the kept ones. The represented state is unchanged, so
    the sweep stays variational, but occupations the bare two-site update
    cannot reach can enter the basis.
    """
    rl, _, _, rr = theta.shape
    u, s, vh, disc = _split(theta, D, floor)
    keep = s.shape[0]
    m = theta.reshape(rl * 2, 2 * rr)
    if right:
        base = u.reshape(rl * 2, keep)
        p = np.tensordot(L, theta, axes=(2, 0))                   # (a, w, i, j, b)
        p = np.tensordot(p, W1, axes=([1, 2], [0, 3]))            # (a, j, b, w', o)
        p = p.transpose(0, 4, 3, 1, 2).reshape(rl * 2, -1)
    else:
        base = vh.reshape(keep, 2 * rr).conj().T
        p = np.tensordot(theta, W2, axes=(2, 3))                  # (a, i, b, w, w', o)
        p = np.tensordot(p, R, axes=([2, 4], [2, 1]))              # (a, i, w, o, c)
        p = p.reshape(-1, 2 * rr).conj().T
    spare = min(D, base.shape[0]) - keep
    if spare > 0:
        p = p - base @ (base.conj().T @ p)
        pu, ps, _ = svd(p)
        n_new = min(spare, int(np.count_nonzero(ps > 1e-10 * max(ps[0], 1e-300)))) if ps.size else 0
        if n_new:
            # keep the added directions orthonormal to the kept ones
            extra, _ = np.linalg.qr(pu[:, :n_new] - base @ (base.conj().T @ pu[:, :n_new]))
            base = np.hstack([base, extra])
    keep = base.shape[1]
    if right:
        return base.reshape(rl, 2, keep), (base.conj().T @ m).reshape(keep, 2, rr), disc
    return (m @ base).reshape(rl, 2, keep), base.conj().T.reshape(keep, 2, rr), disc
