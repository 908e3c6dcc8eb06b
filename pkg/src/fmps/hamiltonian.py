"""Second-quantized electronic Hamiltonians and exact diagonalization.

The Hamiltonian is always

    H = e_core + sum_{pq,s} h_pq a+_{ps} a_{qs}
        + 1/2 sum_{pqrs,s,t} (pq|rs) a+_{ps} a+_{rt} a_{st} a_{qs}

with two-electron integrals in chemist notation. Spatial orbital ``p``
(1-based) occupies chain positions ``2p - 1`` (up) and ``2p`` (down).
Truncating to ``K`` spin orbitals keeps the first ``K / 2`` spatial orbitals.
"""

from __future__ import annotations

import itertools
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from .fock import FockSector, SectorError, StateVector, popcount, sector_labels
from .kernel import lanczos_smallest

logger = logging.getLogger(__name__)

__all__ = [
    "FcidumpError",
    "ModelSpecError",
    "IntegralTable",
    "HubbardChain",
    "DecayingInteraction",
    "FciDump",
    "ModelSpec",
    "parse_fcidump",
    "write_fcidump",
    "parse_model_spec",
    "load_model_file",
    "build_model",
    "HamiltonianOperator",
    "apply_h",
    "GroundState",
    "ed_ground_state",
    "spin_orbital_integrals",
    "hamiltonian_matrix",
    "DENSE_ED_MAX",
    "DEGENERACY_GAP",
]

DENSE_ED_MAX = 2000
DEGENERACY_GAP = 1e-8


class FcidumpError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IntegralTable:
    """One- and two-electron integrals plus a constant shift (hartree)."""

    h: np.ndarray
    V: np.ndarray
    e_core: float = 0.0
    nelec: Optional[int] = None
    two_sz: Optional[int] = None
    symmetry_tol: float = 1e-12

    def __post_init__(self):
        h = np.asarray(self.h)
        V = np.asarray(self.V)
        n = h.shape[0]
        if h.shape != (n, n) or V.shape != (n, n, n, n):
            raise ValueError(f"integral shapes do not match: h {h.shape}, V {V.shape}")
        if np.max(np.abs(h - h.conj().T), initial=0.0) > self.symmetry_tol:
            raise ValueError("one-electron integrals are not hermitian")
        if np.max(np.abs(V - V.transpose(2, 3, 0, 1)), initial=0.0) > self.symmetry_tol:
            raise ValueError("two-electron integrals violate (pq|rs) = (rs|pq)")
        if np.max(np.abs(V - V.transpose(1, 0, 3, 2).conj()), initial=0.0) > self.symmetry_tol:
            raise ValueError("two-electron integrals violate (pq|rs) = (qp|sr)*")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "V", V)

    @property
    def n_orb(self) -> int:
        return self.h.shape[0]

    def truncated(self, n: int) -> "IntegralTable":
        """Restrict every index to the first ``n`` spatial orbitals."""
        if not 1 <= n <= self.n_orb:
            raise ValueError(f"cannot truncate {self.n_orb} orbitals to {n}")
        return IntegralTable(self.h[:n, :n], self.V[:n, :n, :n, :n], self.e_core, self.nelec, self.two_sz)

    def permuted(self, perm) -> "IntegralTable":
        perm = np.asarray(perm)
        return IntegralTable(self.h[np.ix_(perm, perm)], self.V[np.ix_(perm, perm, perm, perm)],
                             self.e_core, self.nelec, self.two_sz)

    def energy_scale(self) -> float:
        """Crude bound on energy differences, used to size sector penalties."""
        one = np.max(np.sum(np.abs(self.h), axis=1), initial=0.0)
        two = np.max(np.sum(np.abs(self.V), axis=(1, 2, 3)), initial=0.0)
        return float(max(1.0, one + two))


# ---------------------------------------------------------------- models

@dataclass(frozen=True)
class HubbardChain:
    L: int
    t: float = 1.0
    U: float = 0.0

    def __post_init__(self):
        if self.L < 1:
            raise ModelSpecError("HubbardChain needs L >= 1")


@dataclass(frozen=True)
class DecayingInteraction:
    """Energy-ordered levels ``a * p`` with interactions ``~ g exp(-gamma (p+q+r+s))``.

    Exponents count from zero, so ``(11|11)`` has scale ``g``. The signs and
    relative sizes come from a seeded random tensor symmetrized under the
    eightfold real permutation group.
    """

    L: int
    a: float = 1.0
    g: float = 1.0
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.L < 1:
            raise ModelSpecError("DecayingInteraction needs L >= 1")
        if not self.gamma > 0:
            raise ModelSpecError("DecayingInteraction needs gamma > 0")


@dataclass(frozen=True)
class FciDump:
    path: str


ModelSpec = Union[HubbardChain, DecayingInteraction, FciDump]

_MODEL_TYPES = {
    "hubbard": (HubbardChain, {"L": int, "t": float, "U": float}),
    "decaying": (DecayingInteraction, {"L": int, "a": float, "g": float, "gamma": float, "seed": int}),
    "fcidump": (FciDump, {"path": str}),
}


def _model_from_mapping(name: str, params: dict) -> ModelSpec:
    try:
        cls, types = _MODEL_TYPES[name.lower()]
    except KeyError:
        raise ModelSpecError(f"unknown model {name!r}; expected one of {sorted(_MODEL_TYPES)}") from None
    kwargs = {}
    for key, value in params.items():
        if key not in types:
            raise ModelSpecError(f"model {name!r} has no parameter {key!r}")
        try:
            kwargs[key] = types[key](value)
        except (TypeError, ValueError):
            raise ModelSpecError(f"bad value {value!r} for {name}.{key}") from None
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ModelSpecError(f"incomplete model {name!r}: {exc}") from None


def parse_model_spec(text: str) -> ModelSpec:
    """Parse ``"name:key=value,..."``, e.g. ``"hubbard:L=2,t=1,U=4"``."""
    name, _, rest = text.partition(":")
    params = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, value = item.partition("=")
        if not eq:
            raise ModelSpecError(f"expected key=value, got {item!r}")
        params[key.strip()] = value.strip()
    return _model_from_mapping(name.strip(), params)


def load_model_file(path: Union[str, Path]) -> ModelSpec:
    """Model from a JSON or YAML mapping with a ``model`` key naming the type."""
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict) or "model" not in data:
        raise ModelSpecError("model file needs a mapping with a 'model' key")
    data = dict(data)
    return _model_from_mapping(str(data.pop("model")), data)


def _hubbard_table(m: HubbardChain) -> IntegralTable:
    h = np.zeros((m.L, m.L))
    for p in range(m.L - 1):
        h[p, p + 1] = h[p + 1, p] = -m.t
    V = np.zeros((m.L,) * 4)
    for p in range(m.L):
        V[p, p, p, p] = m.U
    return IntegralTable(h, V)


def _symmetrize_8fold(x: np.ndarray) -> np.ndarray:
    perms = [(0, 1, 2, 3), (1, 0, 2, 3), (0, 1, 3, 2), (1, 0, 3, 2),
             (2, 3, 0, 1), (3, 2, 0, 1), (2, 3, 1, 0), (3, 2, 1, 0)]
    return sum(x.transpose(p) for p in perms) / 8.0


def _decaying_table(m: DecayingInteraction) -> IntegralTable:
    rng = np.random.default_rng(m.seed)
    n = m.L
    h = np.diag(m.a * np.arange(1, n + 1, dtype=float))
    x = _symmetrize_8fold(rng.uniform(-1.0, 1.0, size=(n,) * 4))
    p = np.arange(n, dtype=float)
    decay = np.exp(-m.gamma * (p[:, None, None, None] + p[None, :, None, None]
                               + p[None, None, :, None] + p[None, None, None, :]))
    return IntegralTable(h, m.g * decay * x)


def build_model(spec: ModelSpec) -> IntegralTable:
    if isinstance(spec, HubbardChain):
        return _hubbard_table(spec)
    if isinstance(spec, DecayingInteraction):
        return _decaying_table(spec)
    if isinstance(spec, FciDump):
        return parse_fcidump(spec.path)
    raise ModelSpecError(f"not a model spec: {spec!r}")


# ---------------------------------------------------------------- FCIDUMP

_HEADER_INT = re.compile(r"\b(NORB|NELEC|MS2|ISYM)\s*=\s*([-+]?\d+)", re.IGNORECASE)


def _fortran_float(token: str) -> float:
    return float(token.replace("D", "E").replace("d", "e"))


def parse_fcidump(path: Union[str, Path]) -> IntegralTable:
    """Read an FCIDUMP file (real integrals, eightfold symmetry)."""
    lines = Path(path).read_text().splitlines()
    header = []
    body_start = None
    for lineno, line in enumerate(lines, 1):
        header.append(line)
        stripped = line.strip().upper()
        if stripped.startswith("&END") or stripped == "/" or stripped.endswith("&END") or stripped.endswith("/"):
            body_start = lineno
            break
    if not header or not header[0].strip().upper().startswith("&FCI"):
        raise FcidumpError("missing '&FCI' header", 1)
    if body_start is None:
        raise FcidumpError("header is not terminated by &END or /", len(lines))
    fields = {k.upper(): int(v) for k, v in _HEADER_INT.findall(" ".join(header))}
    if "NORB" not in fields:
        raise FcidumpError("header lacks NORB", 1)
    n = fields["NORB"]
    if n < 1:
        raise FcidumpError(f"NORB must be positive, got {n}", 1)
    h = np.zeros((n, n))
    V = np.zeros((n, n, n, n))
    e_core = 0.0
    for lineno in range(body_start + 1, len(lines) + 1):
        line = lines[lineno - 1].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FcidumpError(f"expected 'value i j k l', got {line!r}", lineno)
        try:
            value = _fortran_float(parts[0])
            i, j, k, l = (int(x) for x in parts[1:])
        except ValueError:
            raise FcidumpError(f"cannot parse {line!r}", lineno) from None
        if any(not 0 <= x <= n for x in (i, j, k, l)):
            raise FcidumpError(f"orbital index outside [0, {n}] in {line!r}", lineno)
        if i == j == k == l == 0:
            e_core = value
        elif j == 0 and k == 0 and l == 0:
            continue  # orbital energies
        elif k == 0 and l == 0:
            if i == 0 or j == 0:
                raise FcidumpError(f"one-electron line needs two indices: {line!r}", lineno)
            h[i - 1, j - 1] = h[j - 1, i - 1] = value
        elif 0 in (i, j, k, l):
            raise FcidumpError(f"malformed index pattern in {line!r}", lineno)
        else:
            p, q, r, s = i - 1, j - 1, k - 1, l - 1
            for a, b, c, d in ((p, q, r, s), (q, p, r, s), (p, q, s, r), (q, p, s, r),
                               (r, s, p, q), (s, r, p, q), (r, s, q, p), (s, r, q, p)):
                V[a, b, c, d] = value
    return IntegralTable(h, V, e_core, fields.get("NELEC"), fields.get("MS2", 0))


def write_fcidump(table: IntegralTable, path: Union[str, Path], tol: float = 0.0) -> None:
    """Write the unique integrals of a real table."""
    n = table.n_orb
    nelec = table.nelec if table.nelec is not None else 0
    ms2 = table.two_sz if table.two_sz is not None else 0
    out = [f"&FCI NORB={n},NELEC={nelec},MS2={ms2},", " ORBSYM=" + "1," * n, " ISYM=1,", "&END"]
    for p, q, r, s in itertools.product(range(n), repeat=4):
        if p >= q and r >= s and p * (p + 1) // 2 + q >= r * (r + 1) // 2 + s:
            v = float(np.real(table.V[p, q, r, s]))
            if abs(v) > tol:
                out.append(f"{v!r} {p + 1} {q + 1} {r + 1} {s + 1}")
    for p in range(n):
        for q in range(p + 1):
            v = float(np.real(table.h[p, q]))
            if abs(v) > tol:
                out.append(f"{v!r} {p + 1} {q + 1} 0 0")
    out.append(f"{float(table.e_core)!r} 0 0 0 0")
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------- operator

def spin_orbital_integrals(table: IntegralTable, K: int):
    """Spin-orbital ``h[i, j]`` and ``G[i, j, k, l] = (ij|kl)`` for chain positions 0..K-1."""
    if K % 2 or K // 2 > table.n_orb:
        raise ValueError(f"K={K} needs to be even and at most {2 * table.n_orb}")
    n = K // 2
    spatial = np.repeat(np.arange(n), 2)
    spin = np.tile([0, 1], n)
    same = spin[:, None] == spin[None, :]
    h = table.h[np.ix_(spatial, spatial)] * same
    G = table.V[np.ix_(spatial, spatial, spatial, spatial)] * same[:, :, None, None] * same[None, None, :, :]
    return h, G


def _apply_annihilators(labels: np.ndarray, K: int, orbitals: tuple[int, ...]):
    """Apply ``a_{o_1}`` then ``a_{o_2}`` ... (0-based positions) to every label.

    Returns (mask of labels where all act, resulting labels, signs).
    """
    cur = labels.copy()
    sign = np.ones(labels.shape[0], dtype=np.int64)
    ok = np.ones(labels.shape[0], dtype=bool)
    for o in orbitals:
        bit = 1 << (K - 1 - o)
        ok &= (cur & bit) != 0
        parity = popcount(cur >> (K - o)) & 1
        sign = np.where(parity == 1, -sign, sign)
        cur = cur & ~bit
    return ok, cur, sign


def _quadratic_form(labels: np.ndarray, K: int, groups: list[tuple[int, ...]], W: np.ndarray) -> sp.csr_matrix:
    """``sum_{g, g'} W[g, g'] X_g^dagger X_g'`` where ``X_g`` annihilates group ``g``."""
    rows, tgt, vals = [], [], []
    src = []
    n = labels.shape[0]
    for gi, g in enumerate(groups):
        ok, cur, sign = _apply_annihilators(labels, K, g)
        idx = np.nonzero(ok)[0]
        src.append(idx)
        rows.append(np.full(idx.shape[0], gi))
        tgt.append(cur[idx])
        vals.append(sign[idx].astype(float))
    if not src or sum(map(len, src)) == 0:
        return sp.csr_matrix((n, n))
    rows = np.concatenate(rows)
    tgt = np.concatenate(tgt)
    src = np.concatenate(src)
    vals = np.concatenate(vals)
    targets, t_idx = np.unique(tgt, return_inverse=True)
    nt = targets.shape[0]
    ng = len(groups)
    X = sp.csr_matrix((vals, (rows * nt + t_idx, src)), shape=(ng * nt, n))
    # Y = (W kron 1) X, evaluated only on the occupied (target, source) columns
    cols = t_idx * n + src
    ucols, c_idx = np.unique(cols, return_inverse=True)
    Xc = np.zeros((ng, ucols.shape[0]))
    np.add.at(Xc, (rows, c_idx), vals)
    Yc = np.asarray(W, dtype=float) @ Xc
    g_rep = np.repeat(np.arange(ng), ucols.shape[0])
    col_rep = np.tile(ucols, ng)
    keep = Yc.ravel() != 0
    Y = sp.csr_matrix((Yc.ravel()[keep], ((g_rep * nt + col_rep // n)[keep], (col_rep % n)[keep])),
                      shape=(ng * nt, n))
    return (X.T @ Y).tocsr()


def _complex_integrals(table: IntegralTable) -> bool:
    return np.iscomplexobj(table.h) or np.iscomplexobj(table.V)


def hamiltonian_matrix(table: IntegralTable, sector: FockSector, tol: float = 0.0) -> sp.csr_matrix:
    """Sparse matrix of ``H`` on the enumerated basis of ``sector``."""
    if _complex_integrals(table):
        raise NotImplementedError("complex integrals are not supported by the sparse builder")
    K = sector.K
    labels = sector_labels(sector)
    n = labels.shape[0]
    h, G = spin_orbital_integrals(table, K)
    singles = [(i,) for i in range(K)]
    H = table.e_core * sp.identity(n, format="csr")
    H = H + _quadratic_form(labels, K, singles, h)
    pairs = list(itertools.combinations(range(K), 2))
    if pairs:
        a = np.array([p[0] for p in pairs])
        b = np.array([p[1] for p in pairs])
        # pair operator X_ab = a_b a_a; W from the four orderings of (a, b) and (c, d)
        A, C = a[:, None], a[None, :]
        B, Dd = b[:, None], b[None, :]
        W = 0.5 * (G[A, C, B, Dd] - G[B, C, A, Dd] - G[A, Dd, B, C] + G[B, Dd, A, C])
        if tol:
            W = np.where(np.abs(W) > tol, W, 0.0)
        H = H + _quadratic_form(labels, K, pairs, W)
    return H.tocsr()


@dataclass(eq=False)
class HamiltonianOperator:
    """``H`` bound to a sector; the sparse matrix is built on first use."""

    table: IntegralTable
    sector: FockSector
    _matrix: Optional[sp.csr_matrix] = field(default=None, repr=False)

    def __post_init__(self):
        if self.sector.K % 2 or self.sector.K // 2 > self.table.n_orb:
            raise SectorError(f"sector K={self.sector.K} incompatible with {self.table.n_orb} spatial orbitals")

    @property
    def dim(self) -> int:
        return self.sector.dim

    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            self._matrix = hamiltonian_matrix(self.table, self.sector)
        return self._matrix

    def apply(self, coeffs: np.ndarray) -> np.ndarray:
        return self.matrix() @ coeffs


def apply_h(op: HamiltonianOperator, state: StateVector) -> StateVector:
    if state.sector != op.sector:
        raise SectorError(f"state lives in {state.sector}, operator in {op.sector}")
    return StateVector(op.sector, op.apply(state.coeffs))


@dataclass(frozen=True, eq=False)
class GroundState:
    energy: float
    state: StateVector
    gap: float
    residual: float

    @property
    def degenerate(self) -> bool:
        return self.gap < DEGENERACY_GAP


def ed_ground_state(op: HamiltonianOperator, tol: float = 1e-13, seed: int = 0) -> GroundState:
    """Lowest eigenpair in the operator's sector.

    Dense diagonalization up to ``DENSE_ED_MAX`` states, Lanczos beyond. The
    gap to the next level is reported so degenerate ground states can be
    flagged.
    """
    H = op.matrix()
    n = op.dim
    if n <= DENSE_ED_MAX:
        w, v = np.linalg.eigh(H.toarray())
        energy, vec = float(w[0]), v[:, 0]
        gap = float(w[1] - w[0]) if n > 1 else np.inf
    else:
        energy, vec = lanczos_smallest(lambda x: H @ x, n, tol=tol, seed=seed)
        shift = 2.0 * (abs(energy) + float(abs(H).sum(axis=1).max()))
        e1, _ = lanczos_smallest(lambda x: H @ x + shift * vec * np.vdot(vec, x), n, tol=1e-10, seed=seed + 1)
        gap = e1 - energy
    residual = float(np.linalg.norm(H @ vec - energy * vec))
    if gap < DEGENERACY_GAP:
        logger.warning("ground state in %s is degenerate (gap %.2e)", op.sector, gap)
    return GroundState(energy, StateVector(op.sector, vec / np.linalg.norm(vec), normalized=True), gap, residual)
