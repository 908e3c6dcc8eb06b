"""Command-line front end.

Subcommands: ``solve``, ``canonicalize``, ``project``, ``spectrum``, ``pair``
and ``ladder``. Exit codes: 0 success, 2 bad input (parse errors, bond out
of range, odd-K pairing, gauge preconditions), 3 solver non-convergence,
4 file-system errors.

Every text artifact starts with comment lines carrying the tool version and
a hash of the command configuration (output paths excluded), so reruns with
the same configuration produce byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .convergence import LadderConfig, config_hash, default_ladder, format_spectrum_table, run_ladder
from .dmrg import SweepConfig, dmrg_ground_state, mpo_from_integrals
from .fock import FockSector, SectorError, embed_full
from .hamiltonian import (
    FciDump,
    FcidumpError,
    HamiltonianOperator,
    ModelSpecError,
    build_model,
    ed_ground_state,
    load_model_file,
    parse_model_spec,
)
from .kernel import ConvergenceError
from .mps import (
    MAX_DENSE_K,
    ZERO_CLOSURE_TOL,
    DenseTooLargeError,
    GaugeError,
    PairingError,
    closure_norms,
    closure_vector,
    fix_closure_gauge,
    from_dense,
    left_canonicalize,
    pair_spin,
    project_truncated,
    schmidt_spectrum,
)
from .mpsio import MpsFormatError, load_mps, save_mps

logger = logging.getLogger("fmps")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_IO = 4

ED_MAX_DIM = 2_000_000


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers

def _meta_line(args: argparse.Namespace) -> str:
    return f"fmps {__version__} config {_args_hash(args)}"


def _args_hash(args: argparse.Namespace) -> str:
    skip = {"output", "record", "out_dir", "func", "verbose", "quiet"}
    d = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    blob = json.dumps(d, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _require_file(path: Optional[str], what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}", EXIT_IO)
    return p


def _require_parent(path: Optional[str]) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise CliError(f"output directory does not exist: {parent}", EXIT_IO)
    return p


def _write_text(path: Optional[Path], text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def _load(path: str):
    p = _require_file(path, "MPS file")
    return load_mps(p)


def _model_from_args(args):
    sources = [s for s in (args.model, args.model_file, args.fcidump) if s is not None]
    if len(sources) != 1:
        raise CliError("give exactly one of --model, --model-file, --fcidump", EXIT_INPUT)
    if args.fcidump is not None:
        return FciDump(str(_require_file(args.fcidump, "FCIDUMP file")))
    if args.model_file is not None:
        return load_model_file(_require_file(args.model_file, "model file"))
    return parse_model_spec(args.model)


def _sector_from_args(args, table, K: int) -> FockSector:
    N = args.nelec if args.nelec is not None else table.nelec
    ms2 = args.ms2 if args.ms2 is not None else table.two_sz
    if N is None:
        N = K // 2  # half filling
    if ms2 is None:
        ms2 = N % 2
    return FockSector(K, N, ms2)


def _fmt(x: float) -> str:
    return f"{x:.16e}"


# ---------------------------------------------------------------- commands

def cmd_solve(args) -> int:
    spec = _model_from_args(args)
    out = _require_parent(args.output)
    record = _require_parent(args.record)
    table = build_model(spec)
    n_orb = args.norb if args.norb is not None else table.n_orb
    if not 1 <= n_orb <= table.n_orb:
        raise CliError(f"--norb must lie in [1, {table.n_orb}]", EXIT_INPUT)
    table = table.truncated(n_orb)
    K = 2 * n_orb
    sector = _sector_from_args(args, table, K)
    solver = args.solver
    if solver == "auto":
        solver = "ed" if K <= MAX_DENSE_K and sector.dim <= ED_MAX_DIM else "dmrg"
    info = {"K": K, "N": sector.N, "two_sz": sector.two_sz, "solver": solver}
    if solver == "ed":
        if K > MAX_DENSE_K:
            raise CliError(f"exact solve needs K <= {MAX_DENSE_K}, got {K}; use --solver dmrg", EXIT_INPUT)
        gs = ed_ground_state(HamiltonianOperator(table, sector), seed=args.seed)
        mps = from_dense(embed_full(gs.state))
        energy, converged = gs.energy, True
        info.update(gap=gs.gap, residual=gs.residual, degenerate=gs.degenerate)
    else:
        mpo = mpo_from_integrals(table, K)
        cfg = SweepConfig(D_schedule=SweepConfig.ramp(args.D).D_schedule, tol=args.tol, max_sweeps=args.max_sweeps)
        res = dmrg_ground_state(mpo, sector, cfg, seed=args.seed)
        mps, energy, converged = res.mps, res.energy, res.converged
        info.update(D=args.D, sweeps=res.diagnostics["sweeps"], energies=list(res.energies))
    info.update(energy=energy, converged=converged)
    print(f"energy {energy:.12f}")
    if out is not None:
        save_mps(mps, out)
    if record is not None:
        rec = {"meta": {"tool": "fmps", "version": __version__, "config_hash": _args_hash(args)}, **info}
        record.write_text(json.dumps(rec, indent=2, sort_keys=True, default=float) + "\n")
    if not converged:
        raise CliError("DMRG did not converge within the sweep limit", EXIT_SOLVER)
    return EXIT_OK


def cmd_canonicalize(args) -> int:
    mps = _load(args.input)
    out = _require_parent(args.output)
    canon = fix_closure_gauge(left_canonicalize(mps) if mps.canonical_form == "none" else mps)
    if out is not None:
        save_mps(canon, out)
    lines = [f"# {_meta_line(args)}", f"# closure norms K={canon.K}", "# bond |v_k|"]
    zero = set(canon.zero_closure)
    for k, v in enumerate(closure_norms(canon)):
        lines.append(f"{k} {_fmt(v)}" + (" zero" if k in zero or v <= ZERO_CLOSURE_TOL else ""))
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_project(args) -> int:
    mps = _load(args.input)
    out = _require_parent(args.output)
    if mps.canonical_form != "closure":
        raise CliError("input must be in closure gauge; run 'fmps canonicalize' first", EXIT_INPUT)
    k = args.bond
    if not 1 <= k <= mps.K:
        raise CliError(f"bond {k} outside [1, {mps.K}]", EXIT_INPUT)
    state = project_truncated(mps, k)
    nv = closure_vector(mps, k).norm
    lines = [f"# {_meta_line(args)}", f"# projection K={mps.K} k={k} closure_norm={_fmt(nv)}"]
    amps = state.coeffs
    nz = np.flatnonzero(amps)
    if nz.size == 0:
        lines.append("# EMPTY PROJECTION (zero by convention)")
    complex_out = np.iscomplexobj(amps) and np.any(amps.imag != 0)
    for i in nz:
        a = amps[i]
        bits = format(int(i), f"0{k}b")
        lines.append(f"{bits} {_fmt(a.real)} {_fmt(a.imag)}" if complex_out else f"{bits} {_fmt(float(np.real(a)))}")
    _write_text(out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_spectrum(args) -> int:
    mps = _load(args.input)
    out = _require_parent(args.output)
    if not 1 <= args.bond < mps.K:
        raise CliError(f"bond {args.bond} outside [1, {mps.K - 1}]", EXIT_INPUT)
    spec = schmidt_spectrum(mps, args.bond)
    _write_text(out, format_spectrum_table(spec.values, mps.K, mps.max_bond(), args.bond, meta=_meta_line(args)))
    return EXIT_OK


def cmd_pair(args) -> int:
    mps = _load(args.input)
    out = _require_parent(args.output)
    blocks = pair_spin(mps)
    if out is not None:
        arrays = {f"B{b.l}": b.blocks for b in blocks}
        with open(out, "wb") as fh:
            np.savez(fh, norm_factor=np.array(mps.norm_factor), **arrays)
    lines = [f"# {_meta_line(args)}", f"# spatial sites L={len(blocks)}", "# site R_left R_right left_normal_dev"]
    for b in blocks:
        t = b.blocks
        gram = np.einsum("anb,anc->bc", t.conj(), t)
        dev = float(np.max(np.abs(gram - np.eye(t.shape[2])))) if mps.canonical_form != "none" else float("nan")
        lines.append(f"{b.l} {t.shape[0]} {t.shape[2]} {_fmt(dev)}")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def _ladder_config(args) -> LadderConfig:
    overrides = {}
    if args.config is not None:
        path = _require_file(args.config, "ladder config")
        text = path.read_text()
        if path.suffix in (".yaml", ".yml"):
            import yaml

            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
        if not isinstance(data, dict):
            raise CliError("ladder config must be a mapping", EXIT_INPUT)
        overrides.update(data)
    for key in ("N", "two_sz", "K_list", "D_list", "probe", "ed_max_K", "seed"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = v
    if args.model is not None:
        overrides["model"] = args.model
    model = overrides.get("model")
    if isinstance(model, str):
        overrides["model"] = parse_model_spec(model)
    elif isinstance(model, dict):
        m = dict(model)
        name = m.pop("model", m.pop("name", None))
        overrides["model"] = parse_model_spec(f"{name}:" + ",".join(f"{k}={v}" for k, v in m.items()))
    unknown = set(overrides) - set(LadderConfig.__dataclass_fields__)
    if unknown:
        raise CliError(f"unknown ladder config keys: {sorted(unknown)}", EXIT_INPUT)
    try:
        return default_ladder(**overrides, workers=args.workers)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid ladder config: {exc}", EXIT_INPUT) from exc


def cmd_ladder(args) -> int:
    cfg = _ladder_config(args)
    out_dir = Path(args.out_dir)
    if out_dir.exists() and not out_dir.is_dir():
        raise CliError(f"not a directory: {out_dir}", EXIT_IO)
    report = run_ladder(cfg)
    paths = report.write(out_dir)
    print(f"# fmps {__version__} config {config_hash(cfg)}")
    for D, entry in report.distances.items():
        deltas = " ".join(f"{x:.3e}" for x in entry["delta"])
        print(f"{D} K*={entry['K_star']} delta: {deltas}")
    for w in report.warnings:
        print(f"warning: {w}")
    print(f"wrote {len(paths)} files to {out_dir}")
    if any(not p.ok or not p.converged for p in report.points):
        return EXIT_SOLVER
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _int_list(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fmps", description="Fermionic MPS toolkit with closure-vector gauge.")
    p.add_argument("--version", action="version", version=f"fmps {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="ground state by exact diagonalization or DMRG")
    src = s.add_argument_group("model source (exactly one)")
    src.add_argument("--model", help='mini-language, e.g. "hubbard:L=2,t=1,U=4"')
    src.add_argument("--model-file", help="JSON/YAML file with a 'model' key")
    src.add_argument("--fcidump", help="FCIDUMP integral file")
    s.add_argument("--nelec", type=int, help="particle number (default: file header or half filling)")
    s.add_argument("--ms2", type=int, help="2 S_z (default: file header or N mod 2)")
    s.add_argument("--norb", type=int, help="keep the first NORB spatial orbitals")
    s.add_argument("--solver", choices=("auto", "ed", "dmrg"), default="auto")
    s.add_argument("-D", type=int, default=16, help="DMRG bond cap")
    s.add_argument("--tol", type=float, default=1e-10, help="DMRG sweep energy tolerance")
    s.add_argument("--max-sweeps", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", help="write the ground-state MPS here")
    s.add_argument("--record", help="write a JSON energy record here")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("canonicalize", help="bring an MPS into closure gauge")
    c.add_argument("input")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_canonicalize)

    pr = sub.add_parser("project", help="normalized projection onto the first k orbitals")
    pr.add_argument("input")
    pr.add_argument("-k", "--bond", type=int, required=True)
    pr.add_argument("-o", "--output")
    pr.set_defaults(func=cmd_project)

    sp = sub.add_parser("spectrum", help="Schmidt spectrum at a bond")
    sp.add_argument("input")
    sp.add_argument("-k", "--bond", type=int, required=True)
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_spectrum)

    pa = sub.add_parser("pair", help="merge spin-orbital pairs into spatial sites")
    pa.add_argument("input")
    pa.add_argument("-o", "--output", help="write the spatial tensors (.npz)")
    pa.set_defaults(func=cmd_pair)

    la = sub.add_parser("ladder", help="K/D convergence ladder")
    la.add_argument("--config", help="JSON/YAML ladder configuration")
    la.add_argument("--model", help="model mini-language (overrides the config file)")
    la.add_argument("--nelec", dest="N", type=int)
    la.add_argument("--ms2", dest="two_sz", type=int)
    la.add_argument("--K-list", dest="K_list", type=_int_list)
    la.add_argument("--D-list", dest="D_list", type=_int_list)
    la.add_argument("--probe", type=int, help="probe bond (spin orbitals)")
    la.add_argument("--ed-max-K", dest="ed_max_K", type=int)
    la.add_argument("--seed", type=int)
    la.add_argument("--workers", type=int, help="process count (default: FMPS_WORKERS or 1)")
    la.add_argument("--out-dir", required=True)
    la.set_defaults(func=cmd_ladder)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.ERROR if args.quiet else (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"fmps: error: {exc}", file=sys.stderr)
        return exc.code
    except (ModelSpecError, FcidumpError, SectorError, PairingError, GaugeError, MpsFormatError,
            DenseTooLargeError, IndexError) as exc:
        print(f"fmps: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConvergenceError as exc:
        print(f"fmps: error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"fmps: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
