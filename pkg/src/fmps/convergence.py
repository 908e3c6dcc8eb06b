"""Basis-size and bond-dimension convergence ladders.

For every ``(K, D)`` on the ladder the ground state of the Hamiltonian
restricted to the first ``K/2`` spatial orbitals is computed, brought into a
reproducible normal form (Schmidt-basis gauge followed by the closure gauge)
and reduced to the quantities compared across ``K``: the Schmidt spectrum at
a fixed probe bond, the closure norms and the first site tensors.

Small ``K`` are solved exactly and capped by SVD truncation; larger ``K``
run two-site DMRG at each cap. Spectra are normalized to unit squared sum.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import __version__
from .dmrg import SweepConfig, dmrg_ground_state, mpo_from_integrals
from .fock import FockSector, embed_full, project_mask
from .hamiltonian import (
    DecayingInteraction,
    HamiltonianOperator,
    ModelSpec,
    build_model,
    ed_ground_state,
)
from .mps import (
    ZERO_CLOSURE_TOL,
    Mps,
    SchmidtSpectrum,
    check_left_normalized,
    closure_norms,
    fix_closure_gauge,
    from_dense,
    project_truncated,
    schmidt_canonicalize,
    schmidt_spectrum,
    to_dense,
    truncate,
)

logger = logging.getLogger(__name__)

__all__ = [
    "LadderConfig",
    "LadderPoint",
    "ConvergenceReport",
    "default_ladder",
    "run_ladder",
    "spectrum_distance",
    "tensor_distance",
    "pad_site",
    "plateau",
    "tail_fit",
    "format_spectrum_table",
    "parse_spectrum_table",
    "config_hash",
]

WORKERS_ENV = "FMPS_WORKERS"
DEGENERACY_GAP = 1e-8


@dataclass(frozen=True)
class LadderConfig:
    """One ladder: a model, a sector, the K and D lists and the probe bond.

    ``probe`` is a spin-orbital bond; ``ed_max_K`` is the largest ``K``
    solved by exact diagonalization, bigger ``K`` use DMRG.
    """

    model: ModelSpec
    N: Optional[int]
    two_sz: Optional[int]
    K_list: tuple
    D_list: tuple
    probe: int
    ed_max_K: int = 20
    seed: int = 0
    dmrg_tol: float = 1e-10
    dmrg_max_sweeps: int = 30
    degenerate_rtol: float = 1e-6
    workers: Optional[int] = None

    def __post_init__(self):
        K_list = tuple(int(k) for k in self.K_list)
        D_list = tuple(int(d) for d in self.D_list)
        object.__setattr__(self, "K_list", K_list)
        object.__setattr__(self, "D_list", D_list)
        if not K_list or not D_list:
            raise ValueError("K and D lists must be non-empty")
        if any(b <= a for a, b in zip(K_list, K_list[1:])):
            raise ValueError(f"K list must be strictly increasing, got {K_list}")
        if any(k % 2 for k in K_list):
            raise ValueError(f"K values count spin orbitals and must be even, got {K_list}")
        if min(D_list) < 1:
            raise ValueError("D values must be positive")
        if not 1 <= self.probe < K_list[0]:
            raise ValueError(f"probe bond {self.probe} must satisfy 1 <= k < min(K) = {K_list[0]}")

    def solver_for(self, K: int) -> str:
        return "ed" if K <= self.ed_max_K else "dmrg"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = {"name": type(self.model).__name__, **dataclasses.asdict(self.model)}
        d["K_list"] = list(self.K_list)
        d["D_list"] = list(self.D_list)
        d.pop("workers")
        return d


def default_ladder(**overrides) -> LadderConfig:
    """Desk-scale ladder on the decaying-interaction model."""
    base = dict(
        model=DecayingInteraction(L=12, a=1.0, g=1.0, gamma=1.0, seed=0),
        N=4,
        two_sz=0,
        K_list=(8, 12, 16, 20, 24),
        D_list=(24, 32),
        probe=4,
        ed_max_K=20,
    )
    base.update(overrides)
    return LadderConfig(**base)


def config_hash(config: Union[LadderConfig, dict]) -> str:
    """Short SHA-256 of the canonical JSON form of a configuration."""
    d = config.to_dict() if isinstance(config, LadderConfig) else config
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class LadderPoint:
    K: int
    D: int
    solver: str
    energy: float = float("nan")
    converged: bool = False
    gap: Optional[float] = None
    degenerate: bool = False
    spectrum: Optional[SchmidtSpectrum] = None
    closure_norms: Optional[np.ndarray] = None
    discarded: Optional[np.ndarray] = None
    left_normal_dev: float = float("nan")
    projection_error: Optional[float] = None
    tensor_distance_prev: Optional[list] = None
    probe_sites: Optional[list] = field(default=None, repr=False)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.spectrum is not None

    @property
    def retained_weight(self) -> float:
        """``1 - sum of discarded weights`` over all bonds."""
        if self.discarded is None:
            return float("nan")
        return float(1.0 - np.sum(self.discarded))

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "D": self.D,
            "solver": self.solver,
            "energy": _num(self.energy),
            "converged": self.converged,
            "gap": _num(self.gap),
            "degenerate": self.degenerate,
            "n_schmidt": None if self.spectrum is None else len(self.spectrum.values),
            "spectrum": None if self.spectrum is None else [float(x) for x in self.spectrum.values],
            "closure_norms": None if self.closure_norms is None else [float(x) for x in self.closure_norms],
            "discarded": None if self.discarded is None else [float(x) for x in self.discarded],
            "retained_weight": _num(self.retained_weight) if self.discarded is not None else None,
            "left_normal_dev": _num(self.left_normal_dev),
            "projection_error": _num(self.projection_error),
            "tensor_distance_prev": self.tensor_distance_prev,
            "error": self.error,
        }


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if np.isfinite(x) else None


@dataclass
class ConvergenceReport:
    config: LadderConfig
    points: list
    distances: dict
    tail: Optional[dict]
    warnings: list

    def point(self, K: int, D: int) -> LadderPoint:
        for p in self.points:
            if p.K == K and p.D == D:
                return p
        raise KeyError((K, D))

    def to_dict(self) -> dict:
        return {
            "meta": {
                "tool": "fmps",
                "version": __version__,
                "config": self.config.to_dict(),
                "config_hash": config_hash(self.config),
                "spectrum_normalization": "unit squared sum",
            },
            "points": [p.to_dict() for p in self.points],
            "distances": self.distances,
            "tail_fit": self.tail,
            "warnings": self.warnings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: Union[str, os.PathLike]) -> list[Path]:
        """Write ``report.json`` and one spectrum table per point; returns the paths."""
        out = Path(out_dir)
        (out / "spectra").mkdir(parents=True, exist_ok=True)
        paths = []
        path = out / "report.json"
        path.write_text(self.to_json())
        paths.append(path)
        h = config_hash(self.config)
        for p in self.points:
            if not p.ok:
                continue
            path = out / "spectra" / f"K{p.K}_D{p.D}.txt"
            path.write_text(format_spectrum_table(p.spectrum.values, p.K, p.D, self.config.probe,
                                                  meta=f"fmps {__version__} config {h}"))
            paths.append(path)
        return paths


# ---------------------------------------------------------------- metrics

def spectrum_distance(a, b) -> float:
    """Euclidean distance with the shorter value list zero-padded."""
    a = np.asarray(getattr(a, "values", a), dtype=float)
    b = np.asarray(getattr(b, "values", b), dtype=float)
    n = max(a.size, b.size)
    return float(np.linalg.norm(np.pad(a, (0, n - a.size)) - np.pad(b, (0, n - b.size))))


def pad_site(a: np.ndarray, rl: int, rr: int) -> np.ndarray:
    """Embed ``a`` into shape ``(rl, 2, rr)``.

    Zeros are inserted before the last index of each bond so the closure
    direction ``e_last`` stays last.
    """
    ol, _, orr = a.shape
    if ol > rl or orr > rr:
        raise ValueError(f"cannot pad {a.shape} into ({rl}, 2, {rr})")
    out = np.zeros((rl, 2, rr), dtype=a.dtype)
    li = list(range(ol - 1)) + [rl - 1]
    ri = list(range(orr - 1)) + [rr - 1]
    out[np.ix_(li, [0, 1], ri)] = a
    return out


def tensor_distance(a_sites: Sequence[np.ndarray], b_sites: Sequence[np.ndarray]) -> list:
    """Per-site Frobenius distance after zero-padding to common bond sizes.

    Entries are ``None`` where the sites cannot be compared (different
    physical dimension or a missing site).
    """
    out = []
    for k in range(max(len(a_sites), len(b_sites))):
        if k >= len(a_sites) or k >= len(b_sites):
            out.append(None)
            continue
        a, b = np.asarray(a_sites[k]), np.asarray(b_sites[k])
        if a.ndim != 3 or b.ndim != 3 or a.shape[1] != b.shape[1]:
            out.append(None)
            continue
        rl = max(a.shape[0], b.shape[0])
        rr = max(a.shape[2], b.shape[2])
        out.append(float(np.linalg.norm(pad_site(a, rl, rr) - pad_site(b, rl, rr))))
    return out


def plateau(Ks: Sequence[int], deltas: Sequence[float]) -> dict:
    """Start of the longest non-increasing tail of ``delta(K)``.

    ``deltas[i]`` compares ``Ks[i]`` with ``Ks[i+1]`` and is attributed to
    ``Ks[i+1]``. ``K_star`` is the first ``K`` from which the sequence
    never increases again.
    """
    d = list(deltas)
    if not d:
        return {"K_star": None, "tail_length": 0, "monotone_tail": True}
    start = len(d) - 1
    while start > 0 and d[start] <= d[start - 1]:
        start -= 1
    return {"K_star": int(Ks[start + 1]), "tail_length": len(d) - start, "monotone_tail": start == 0}


def tail_fit(values, floor: float = 1e-12) -> Optional[dict]:
    """Least-squares line through ``log(sigma_alpha)`` against ``alpha``.

    Only values above ``floor`` enter. Returns slope, intercept, RMS
    residual and the number of points, or None with fewer than two.
    """
    v = np.asarray(getattr(values, "values", values), dtype=float)
    v = v[v > floor]
    if v.size < 2:
        return None
    alpha = np.arange(1, v.size + 1, dtype=float)
    A = np.vstack([alpha, np.ones_like(alpha)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, np.log(v), rcond=None)
    resid = np.log(v) - (slope * alpha + icpt)
    return {"slope": float(slope), "intercept": float(icpt),
            "rms_residual": float(np.sqrt(np.mean(resid**2))), "n": int(v.size)}


# ---------------------------------------------------------------- spectrum tables

def format_spectrum_table(values, K: int, D: int, bond: int, meta: Optional[str] = None) -> str:
    """Plain-text table: header line, optional comment, one value per line.

    Values use 17 significant digits, enough to round-trip a double.
    """
    lines = [f"# K={K} D={D} bond={bond}"]
    if meta:
        lines.append(f"# {meta}")
    lines += [f"{float(x):.16e}" for x in np.asarray(getattr(values, "values", values))]
    return "\n".join(lines) + "\n"


def parse_spectrum_table(text: str) -> tuple[dict, np.ndarray]:
    header = {}
    vals = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if not header and all("=" in p for p in parts) and parts:
                header = {k: int(v) for k, v in (p.split("=", 1) for p in parts)}
            continue
        vals.append(float(line))
    return header, np.array(vals)


# ---------------------------------------------------------------- ladder runner

def _normal_form(mps: Mps, cfg: LadderConfig) -> Mps:
    return fix_closure_gauge(schmidt_canonicalize(mps, degenerate_rtol=cfg.degenerate_rtol))


def _fill_point(point: LadderPoint, mps: Mps, cfg: LadderConfig, oracle: bool) -> None:
    canon = _normal_form(mps, cfg)
    point.spectrum = schmidt_spectrum(canon, cfg.probe, D=point.D)
    point.closure_norms = closure_norms(canon)
    point.left_normal_dev = float(np.max(check_left_normalized(canon)))
    point.probe_sites = [np.array(a) for a in canon.sites[: cfg.probe]]
    if oracle:
        proj = project_truncated(canon, cfg.probe).coeffs
        full = to_dense(canon)
        masked = project_mask(full, cfg.probe).coeffs
        # surviving amplitudes live on labels whose tail bits are all zero
        ref = masked.reshape(1 << cfg.probe, -1)[:, 0]
        nrm = np.linalg.norm(ref)
        ref = ref / nrm if nrm > ZERO_CLOSURE_TOL else np.zeros_like(ref)
        point.projection_error = float(np.max(np.abs(proj - ref)))


def _ed_job(cfg: LadderConfig, K: int) -> list:
    points = [LadderPoint(K, D, "ed") for D in cfg.D_list]
    try:
        table = build_model(cfg.model).truncated(K // 2)
        sector = FockSector(K, cfg.N, cfg.two_sz)
        gs = ed_ground_state(HamiltonianOperator(table, sector), seed=cfg.seed)
        exact = from_dense(embed_full(gs.state.normalize()))
    except Exception as exc:  # recorded per point; the ladder goes on
        logger.warning("ED at K=%d failed: %s", K, exc)
        for p in points:
            p.error = f"{type(exc).__name__}: {exc}"
        return points
    for p in points:
        try:
            capped, disc = truncate(exact, p.D)
            p.energy = gs.energy
            p.gap = gs.gap
            p.degenerate = gs.degenerate
            p.converged = True
            p.discarded = disc
            _fill_point(p, capped, cfg, oracle=True)
        except Exception as exc:
            logger.warning("ED point K=%d D=%d failed: %s", K, p.D, exc)
            p.error = f"{type(exc).__name__}: {exc}"
    return points


def _dmrg_job(cfg: LadderConfig, K: int, D: int) -> list:
    p = LadderPoint(K, D, "dmrg")
    try:
        table = build_model(cfg.model).truncated(K // 2)
        sector = FockSector(K, cfg.N, cfg.two_sz)
        mpo = mpo_from_integrals(table, K)
        sweep = SweepConfig(D_schedule=(D,), tol=cfg.dmrg_tol, max_sweeps=cfg.dmrg_max_sweeps)
        res = dmrg_ground_state(mpo, sector, sweep, seed=cfg.seed)
        p.energy = res.energy
        p.converged = res.converged
        p.discarded = np.asarray(res.truncated_weights[-1]) if res.truncated_weights else np.zeros(K - 1)
        _fill_point(p, res.mps, cfg, oracle=False)
    except Exception as exc:
        logger.warning("DMRG point K=%d D=%d failed: %s", K, D, exc)
        p.error = f"{type(exc).__name__}: {exc}"
    return [p]


def _run_job(job):
    kind, cfg, args = job
    return _ed_job(cfg, *args) if kind == "ed" else _dmrg_job(cfg, *args)


def _worker_count(cfg: LadderConfig) -> int:
    if cfg.workers is not None:
        return max(1, int(cfg.workers))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning("ignoring non-integer %s=%r", WORKERS_ENV, env)
    return 1


def run_ladder(config: LadderConfig) -> ConvergenceReport:
    """Solve and canonicalize every ladder point, then compare across ``K``.

    Points are independent jobs, run in a process pool when more than one
    worker is configured (``workers`` or the ``FMPS_WORKERS`` environment
    variable). Results do not depend on the worker count.
    """
    table = build_model(config.model)
    if config.K_list[-1] // 2 > table.n_orb:
        raise ValueError(f"K={config.K_list[-1]} needs {config.K_list[-1] // 2} spatial orbitals, "
                         f"model has {table.n_orb}")
    FockSector(config.K_list[0], config.N, config.two_sz)  # validates the sector early
    jobs = []
    for K in config.K_list:
        if config.solver_for(K) == "ed":
            jobs.append(("ed", config, (K,)))
        else:
            jobs.extend(("dmrg", config, (K, D)) for D in config.D_list)
    workers = min(_worker_count(config), len(jobs))
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    points = sorted((p for r in results for p in r), key=lambda p: (p.K, p.D))
    return _assemble(config, points)


def _assemble(config: LadderConfig, points: list) -> ConvergenceReport:
    warnings = []
    distances = {}
    for D in config.D_list:
        lane = [p for p in points if p.D == D and p.ok]
        Ks = [p.K for p in lane]
        deltas = []
        for prev, cur in zip(lane, lane[1:]):
            deltas.append(spectrum_distance(prev.spectrum, cur.spectrum))
            cur.tensor_distance_prev = tensor_distance(prev.probe_sites, cur.probe_sites)
        entry = {"K": Ks, "delta": deltas}
        entry.update(plateau(Ks, deltas))
        distances[f"D={D}"] = entry
    for p in points:
        if p.error:
            warnings.append(f"K={p.K} D={p.D}: {p.error}")
        elif p.degenerate:
            warnings.append(f"K={p.K} D={p.D}: ground state degenerate (gap {p.gap:.3e}); "
                            "cross-K comparisons may mix states")
        elif not p.converged:
            warnings.append(f"K={p.K} D={p.D}: solver did not converge")
    good = [p for p in points if p.ok]
    tail = None
    if good:
        last = max(good, key=lambda p: (p.K, p.D))
        fit = tail_fit(last.spectrum.values)
        if fit is not None:
            tail = {"K": last.K, "D": last.D, **fit}
    return ConvergenceReport(config, points, distances, tail, warnings)
