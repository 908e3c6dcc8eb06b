"""Occupation-number bases for fermionic Fock spaces.

Labels are packed into integers with orbital 1 as the most significant bit,
so the lexicographic order of bitstrings ``mu_1 ... mu_K`` coincides with the
integer order. A full-space coefficient vector of length ``2**K`` therefore
reshapes (C order) into a tensor with axes ``mu_1, ..., mu_K``; every other
module relies on this.

Spin orbitals come in pairs when spin is relevant: odd positions carry spin
up, even positions spin down.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb
from typing import Optional

import numpy as np

__all__ = [
    "MAX_ORBITALS",
    "SectorError",
    "OccupationLabel",
    "FockSector",
    "StateVector",
    "enumerate_sector",
    "sector_labels",
    "label_rank",
    "rank_label",
    "apply_creation",
    "apply_annihilation",
    "project_mask",
    "embed_full",
    "popcount",
    "two_sz_of",
]

MAX_ORBITALS = 63


class SectorError(ValueError):
    """Raised for inconsistent sectors or labels outside a sector."""


def popcount(x):
    """Number of set bits, elementwise for arrays."""
    if isinstance(x, (int, np.integer)):
        return int(x).bit_count()
    return np.bitwise_count(np.asarray(x, dtype=np.uint64)).astype(np.int64)


def _up_mask(K: int) -> int:
    # odd 1-based positions i sit at bit K - i
    return sum(1 << (K - i) for i in range(1, K + 1, 2))


def two_sz_of(labels, K: int):
    """Twice the spin projection of packed labels (odd orbitals up)."""
    up = _up_mask(K)
    down = ((1 << K) - 1) ^ up
    if isinstance(labels, (int, np.integer)):
        return popcount(int(labels) & up) - popcount(int(labels) & down)
    labels = np.asarray(labels, dtype=np.int64)
    return popcount(labels & up) - popcount(labels & down)


@dataclass(frozen=True)
class OccupationLabel:
    """Bitstring ``mu_1 ... mu_K`` indexing a Slater determinant."""

    value: int
    K: int

    def __post_init__(self):
        if not 0 <= self.K <= MAX_ORBITALS:
            raise ValueError(f"K must lie in [0, {MAX_ORBITALS}], got {self.K}")
        if not 0 <= self.value < (1 << self.K) or (self.K == 0 and self.value != 0):
            raise ValueError(f"label value {self.value} does not fit in {self.K} bits")

    @classmethod
    def from_string(cls, bits: str) -> "OccupationLabel":
        if any(b not in "01" for b in bits):
            raise ValueError(f"not a bitstring: {bits!r}")
        return cls(int(bits, 2) if bits else 0, len(bits))

    @classmethod
    def from_bits(cls, bits) -> "OccupationLabel":
        return cls.from_string("".join(str(int(b)) for b in bits))

    @property
    def bits(self) -> tuple[int, ...]:
        return tuple((self.value >> (self.K - i)) & 1 for i in range(1, self.K + 1))

    @property
    def n_particles(self) -> int:
        return popcount(self.value)

    def occupied(self, i: int) -> bool:
        _check_orbital(i, self.K)
        return bool((self.value >> (self.K - i)) & 1)

    def __str__(self) -> str:
        return format(self.value, f"0{self.K}b") if self.K else ""


@dataclass(frozen=True)
class FockSector:
    """Fock space over ``K`` orbitals, optionally fixing ``N`` and ``2 S_z``."""

    K: int
    N: Optional[int] = None
    two_sz: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.K <= MAX_ORBITALS:
            raise SectorError(f"K must lie in [0, {MAX_ORBITALS}], got {self.K}")
        if self.N is not None and not 0 <= self.N <= self.K:
            raise SectorError(f"N={self.N} outside [0, {self.K}]")
        if self.two_sz is not None:
            if self.K % 2:
                raise SectorError("two_sz is only defined for an even number of spin orbitals")
            if self.N is not None:
                if abs(self.two_sz) > self.N or (self.N - self.two_sz) % 2:
                    raise SectorError(f"inconsistent sector N={self.N}, two_sz={self.two_sz}")
                n_up = (self.N + self.two_sz) // 2
                n_dn = self.N - n_up
                if n_up > self.K // 2 or n_dn > self.K // 2:
                    raise SectorError(f"sector N={self.N}, two_sz={self.two_sz} is empty for K={self.K}")
            elif abs(self.two_sz) > self.K // 2:
                raise SectorError(f"two_sz={self.two_sz} unreachable for K={self.K}")

    @property
    def is_full(self) -> bool:
        return self.N is None and self.two_sz is None

    @property
    def dim(self) -> int:
        if self.is_full:
            return 1 << self.K
        if self.two_sz is None:
            return comb(self.K, self.N)
        return len(sector_labels(self))


def _check_orbital(i: int, K: int) -> None:
    if not 1 <= i <= K:
        raise IndexError(f"orbital index {i} outside [1, {K}]")


def _combination_labels(positions: list[int], n: int) -> np.ndarray:
    """Packed labels with exactly ``n`` set bits among the given bit positions."""
    out = [sum(1 << p for p in c) for c in itertools.combinations(positions, n)]
    return np.array(out, dtype=np.int64)


_LABEL_CACHE: dict[FockSector, np.ndarray] = {}


def sector_labels(sector: FockSector) -> np.ndarray:
    """Packed labels of ``sector`` as a sorted int64 array (read-only)."""
    cached = _LABEL_CACHE.get(sector)
    if cached is not None:
        return cached
    K = sector.K
    if sector.is_full:
        labels = np.arange(1 << K, dtype=np.int64)
    elif sector.N is not None and sector.two_sz is not None:
        n_up = (sector.N + sector.two_sz) // 2
        n_dn = sector.N - n_up
        up_bits = [K - i for i in range(1, K + 1, 2)]
        dn_bits = [K - i for i in range(2, K + 1, 2)]
        ups = _combination_labels(up_bits, n_up)
        dns = _combination_labels(dn_bits, n_dn)
        labels = np.sort((ups[:, None] | dns[None, :]).ravel())
    elif sector.N is not None:
        labels = np.sort(_combination_labels(list(range(K)), sector.N))
    else:
        if K > 30:
            raise SectorError("spin-only sectors are enumerated densely; K too large")
        labels = np.arange(1 << K, dtype=np.int64)
        labels = labels[two_sz_of(labels, K) == sector.two_sz]
    labels.setflags(write=False)
    if len(_LABEL_CACHE) < 256:
        _LABEL_CACHE[sector] = labels
    return labels


def enumerate_sector(sector: FockSector) -> list[OccupationLabel]:
    """All labels of ``sector`` in increasing lexicographic order."""
    return [OccupationLabel(int(v), sector.K) for v in sector_labels(sector)]


def label_rank(label: OccupationLabel, sector: FockSector) -> int:
    if label.K != sector.K:
        raise SectorError(f"label has K={label.K}, sector has K={sector.K}")
    labels = sector_labels(sector)
    pos = int(np.searchsorted(labels, label.value))
    if pos >= len(labels) or labels[pos] != label.value:
        raise SectorError(f"label {label} is not in {sector}")
    return pos


def rank_label(index: int, sector: FockSector) -> OccupationLabel:
    labels = sector_labels(sector)
    if not 0 <= index < len(labels):
        raise SectorError(f"index {index} outside sector of dimension {len(labels)}")
    return OccupationLabel(int(labels[index]), sector.K)


def _jw_sign(value: int, i: int, K: int) -> int:
    # parity of the occupied orbitals strictly before i (the higher bits)
    return -1 if popcount(value >> (K - i + 1)) % 2 else 1


def apply_creation(i: int, label: OccupationLabel) -> Optional[tuple[OccupationLabel, int]]:
    """``a_i^dagger`` on a determinant: new label and sign, or None."""
    _check_orbital(i, label.K)
    bit = 1 << (label.K - i)
    if label.value & bit:
        return None
    return OccupationLabel(label.value | bit, label.K), _jw_sign(label.value, i, label.K)


def apply_annihilation(i: int, label: OccupationLabel) -> Optional[tuple[OccupationLabel, int]]:
    """``a_i`` on a determinant: new label and sign, or None."""
    _check_orbital(i, label.K)
    bit = 1 << (label.K - i)
    if not label.value & bit:
        return None
    return OccupationLabel(label.value ^ bit, label.K), _jw_sign(label.value, i, label.K)


@dataclass(frozen=True, eq=False)
class StateVector:
    """Amplitudes over the enumerated basis of a sector."""

    sector: FockSector
    coeffs: np.ndarray = field(repr=False)
    normalized: bool = False

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs)
        if coeffs.dtype.kind not in "fc":
            coeffs = coeffs.astype(float)
        if coeffs.ndim != 1 or coeffs.shape[0] != self.sector.dim:
            raise ValueError(
                f"expected {self.sector.dim} amplitudes for {self.sector}, got shape {coeffs.shape}"
            )
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("amplitudes must be finite")
        object.__setattr__(self, "coeffs", coeffs)
        if self.normalized and abs(np.linalg.norm(coeffs) - 1.0) > 1e-12:
            raise ValueError("normalized flag set on a state with norm != 1")

    @property
    def K(self) -> int:
        return self.sector.K

    @property
    def labels(self) -> np.ndarray:
        return sector_labels(self.sector)

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def normalize(self) -> "StateVector":
        n = self.norm()
        if n == 0:
            raise ValueError("cannot normalize the zero state")
        return StateVector(self.sector, self.coeffs / n, normalized=True)

    def amplitude(self, label: OccupationLabel | str) -> complex:
        if isinstance(label, str):
            label = OccupationLabel.from_string(label)
        return self.coeffs[label_rank(label, self.sector)]

    @classmethod
    def from_amplitudes(cls, K: int, amplitudes: dict[str, complex]) -> "StateVector":
        """Full-space state from a ``{bitstring: amplitude}`` mapping."""
        dtype = complex if any(isinstance(a, complex) for a in amplitudes.values()) else float
        coeffs = np.zeros(1 << K, dtype=dtype)
        for bits, amp in amplitudes.items():
            lab = OccupationLabel.from_string(bits)
            if lab.K != K:
                raise ValueError(f"label {bits} has the wrong length for K={K}")
            coeffs[lab.value] += amp
        return cls(FockSector(K), coeffs)


def embed_full(state: StateVector) -> StateVector:
    """Scatter a sector state into the full ``2**K`` space."""
    if state.sector.is_full:
        return state
    full = np.zeros(1 << state.K, dtype=state.coeffs.dtype)
    full[state.labels] = state.coeffs
    return StateVector(FockSector(state.K), full, normalized=state.normalized)


def project_mask(state: StateVector, k: int) -> StateVector:
    """Zero every amplitude with an occupied orbital beyond ``k`` (no renormalization)."""
    if not 0 <= k <= state.K:
        raise ValueError(f"k={k} outside [0, {state.K}]")
    tail = (1 << (state.K - k)) - 1
    keep = (state.labels & tail) == 0
    return StateVector(state.sector, np.where(keep, state.coeffs, 0))
