import json
import shutil
import subprocess

import numpy as np
import pytest

from fmps.cli import EXIT_INPUT, EXIT_IO, EXIT_OK, EXIT_SOLVER, main
from fmps.fock import FockSector, StateVector
from fmps.hamiltonian import HubbardChain, build_model, write_fcidump
from fmps.mps import fix_closure_gauge, from_dense, product_state, to_dense
from fmps.mpsio import load_mps, save_mps

import oracles


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def bell(tmp_path):
    s = StateVector.from_amplitudes(2, {"10": 2 ** -0.5, "01": 2 ** -0.5})
    path = tmp_path / "bell.mps"
    save_mps(from_dense(s), path)
    return path


@pytest.fixture
def random_chain(tmp_path):
    rng = np.random.default_rng(9)
    psi = rng.standard_normal(64) + 1j * rng.standard_normal(64)
    s = StateVector(FockSector(6), psi / np.linalg.norm(psi))
    path = tmp_path / "rand.mps"
    save_mps(from_dense(s), path)
    return path, s


class TestSolve:
    @pytest.mark.parametrize("U,expected", [(0.0, -2.0), (4.0, -0.828427124746)])
    def test_dimer(self, capsys, U, expected):
        code, out, _ = run(capsys, "solve", "--model", f"hubbard:L=2,t=1,U={U}")
        assert code == EXIT_OK
        assert out.strip() == f"energy {expected:.12f}"
        assert abs(float(out.split()[1]) - oracles.hubbard_dimer_energy(1.0, U)) < 1e-12

    def test_dmrg_and_outputs(self, capsys, tmp_path):
        mps_path, rec = tmp_path / "gs.mps", tmp_path / "rec.json"
        code, out, _ = run(capsys, "solve", "--model", "hubbard:L=3,U=2", "--solver", "dmrg", "-D", "16",
                           "--nelec", "3", "--ms2", "1", "-o", str(mps_path), "--record", str(rec))
        assert code == EXIT_OK
        code_ed, out_ed, _ = run(capsys, "solve", "--model", "hubbard:L=3,U=2", "--solver", "ed", "--nelec", "3", "--ms2", "1")
        assert abs(float(out.split()[1]) - float(out_ed.split()[1])) < 1e-10
        data = json.loads(rec.read_text())
        assert data["solver"] == "dmrg" and data["converged"] and data["K"] == 6
        assert load_mps(mps_path).K == 6

    def test_fcidump_and_model_file(self, capsys, tmp_path):
        fcid = tmp_path / "FCIDUMP"
        t = build_model(HubbardChain(2, 1.0, 4.0))
        t = type(t)(t.h, t.V, 0.5, nelec=2, two_sz=0)
        write_fcidump(t, fcid)
        code, out, _ = run(capsys, "solve", "--fcidump", str(fcid))
        assert code == EXIT_OK
        assert abs(float(out.split()[1]) - (oracles.hubbard_dimer_energy(1, 4) + 0.5)) < 1e-12
        yml = tmp_path / "m.yaml"
        yml.write_text("model: hubbard\nL: 2\nU: 4\n")
        code, out2, _ = run(capsys, "solve", "--model-file", str(yml))
        assert code == EXIT_OK and abs(float(out2.split()[1]) - oracles.hubbard_dimer_energy(1, 4)) < 1e-12

    def test_record_is_byte_identical(self, capsys, tmp_path):
        for name in ("a", "b"):
            assert run(capsys, "solve", "--model", "hubbard:L=2,U=1", "--record", str(tmp_path / f"{name}.json"))[0] == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    @pytest.mark.parametrize("argv", [
        ["solve"],
        ["solve", "--model", "hubbard:L=2", "--fcidump", "x"],
        ["solve", "--model", "bogus:L=2"],
        ["solve", "--model", "hubbard:L=2", "--nelec", "9"],
        ["solve", "--model", "hubbard:L=2", "--norb", "5"],
        ["solve", "--model", "hubbard:L=13", "--solver", "ed"],
    ])
    def test_input_errors(self, capsys, argv):
        code, _, err = run(capsys, *argv)
        assert code == EXIT_INPUT and "error" in err

    def test_malformed_fcidump(self, capsys, tmp_path):
        p = tmp_path / "FCIDUMP"
        p.write_text("&FCI NORB=2\n&END\n1.0 1 1\n")
        assert run(capsys, "solve", "--fcidump", str(p))[0] == EXIT_INPUT

    def test_missing_files(self, capsys, tmp_path):
        assert run(capsys, "solve", "--fcidump", str(tmp_path / "nope"))[0] == EXIT_IO
        code, _, _ = run(capsys, "solve", "--model", "hubbard:L=2", "-o", str(tmp_path / "no" / "dir" / "x.mps"))
        assert code == EXIT_IO

    def test_non_convergence(self, capsys):
        code, out, _ = run(capsys, "solve", "--model", "hubbard:L=4,U=4", "--solver", "dmrg", "--max-sweeps", "1")
        assert code == EXIT_SOLVER and out.startswith("energy")


class TestTensorCommands:
    def test_canonicalize_then_project(self, capsys, tmp_path, random_chain):
        # the gauge change must leave the represented state untouched
        path, s = random_chain
        closed = tmp_path / "closed.mps"
        code, out, _ = run(capsys, "canonicalize", str(path), "-o", str(closed))
        assert code == EXIT_OK
        rows = [l.split() for l in out.splitlines() if not l.startswith("#")]
        assert len(rows) == 7
        for k, row in enumerate(rows):
            assert abs(float(row[1]) - oracles.mask_norm(s.coeffs, 6, k)) < 1e-10
        m = load_mps(closed)
        assert m.canonical_form == "closure"
        np.testing.assert_allclose(to_dense(m).coeffs, s.coeffs, atol=1e-12)
        code, out, _ = run(capsys, "project", str(closed), "-k", "3")
        assert code == EXIT_OK
        ref = oracles.mask_project(s.coeffs, 6, 3)
        for line in out.splitlines():
            if line.startswith("#"):
                continue
            bits, re_, im_ = line.split()
            assert abs(complex(float(re_), float(im_)) - ref[int(bits, 2)]) < 1e-12

    def test_project_empty(self, capsys, tmp_path):
        psi = np.zeros(16)
        psi[[int(b, 2) for b in ("1100", "0011", "1010")]] = [0.6, 0.0, 0.8]
        path = tmp_path / "s.mps"
        save_mps(fix_closure_gauge(from_dense(StateVector(FockSector(4), psi))), path)
        code, out, _ = run(capsys, "project", str(path), "-k", "1")
        assert code == EXIT_OK and "# EMPTY PROJECTION (zero by convention)" in out
        assert [l for l in out.splitlines() if not l.startswith("#")] == []

    def test_project_requires_closure(self, capsys, bell):
        assert run(capsys, "project", str(bell), "-k", "1")[0] == EXIT_INPUT

    def test_project_bond_range(self, capsys, tmp_path, bell):
        closed = tmp_path / "c.mps"
        run(capsys, "canonicalize", str(bell), "-o", str(closed))
        assert run(capsys, "project", str(closed), "-k", "3")[0] == EXIT_INPUT

    def test_spectrum_bell(self, capsys, bell):
        code, out, _ = run(capsys, "spectrum", str(bell), "-k", "1")
        assert code == EXIT_OK
        lines = out.splitlines()
        assert lines[0] == "# K=2 D=2 bond=1"
        assert lines[2:] == ["7.0710678118654757e-01"] * 2

    def test_spectrum_byte_identical(self, capsys, tmp_path, random_chain):
        path, _ = random_chain
        for name in ("a", "b"):
            assert run(capsys, "spectrum", str(path), "-k", "2", "-o", str(tmp_path / f"{name}.txt"))[0] == 0
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    @pytest.mark.parametrize("bond", ["0", "2"])
    def test_spectrum_bond_range(self, capsys, bell, bond):
        assert run(capsys, "spectrum", str(bell), "-k", bond)[0] == EXIT_INPUT

    def test_pair(self, capsys, tmp_path, random_chain):
        path, s = random_chain
        npz = tmp_path / "p.npz"
        code, out, _ = run(capsys, "pair", str(path), "-o", str(npz))
        assert code == EXIT_OK
        data = np.load(npz)
        m = data["B1"].reshape(4, -1)
        for key in ("B2", "B3"):
            t = data[key]
            m = (m @ t.reshape(t.shape[0], -1)).reshape(-1, t.shape[2])
        nu = float(data["norm_factor"]) * m[:, 0]
        # nu digit = mu_up + 2 mu_down, so spin-orbital bits are (up, down) per site
        for idx in range(64):
            digits = [(idx >> (2 * (2 - l))) & 3 for l in range(3)]
            bits = "".join(f"{d & 1}{d >> 1}" for d in digits)
            assert abs(nu[idx] - s.coeffs[int(bits, 2)]) < 1e-12

    def test_pair_odd(self, capsys, tmp_path):
        path = tmp_path / "odd.mps"
        save_mps(product_state("101"), path)
        assert run(capsys, "pair", str(path))[0] == EXIT_INPUT

    def test_corrupt_and_missing_mps(self, capsys, tmp_path):
        bad = tmp_path / "bad.mps"
        bad.write_bytes(b"not an mps")
        assert run(capsys, "spectrum", str(bad), "-k", "1")[0] == EXIT_INPUT
        assert run(capsys, "spectrum", str(tmp_path / "none.mps"), "-k", "1")[0] == EXIT_IO

    def test_argparse_errors_exit_2(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["spectrum"])
        assert info.value.code == 2


class TestLadder:
    ARGS = ["ladder", "--model", "decaying:L=4", "--nelec", "2", "--ms2", "0", "--K-list", "4,6,8",
            "--D-list", "4,8", "--probe", "2", "--ed-max-K", "6"]

    def test_run_and_byte_identical(self, capsys, tmp_path):
        outs = []
        for name in ("a", "b"):
            code, out, _ = run(capsys, *self.ARGS, "--out-dir", str(tmp_path / name))
            assert code == EXIT_OK
            outs.append(out.replace(str(tmp_path / name), "OUT"))
        assert outs[0] == outs[1]
        names = sorted(p.name for p in (tmp_path / "a" / "spectra").iterdir())
        assert names == sorted(f"K{K}_D{D}.txt" for K in (4, 6, 8) for D in (4, 8))
        for n in names:
            assert (tmp_path / "a" / "spectra" / n).read_bytes() == (tmp_path / "b" / "spectra" / n).read_bytes()
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()

    def test_config_file(self, capsys, tmp_path):
        cfg = tmp_path / "ladder.yaml"
        cfg.write_text("model: {model: decaying, L: 4}\nN: 2\ntwo_sz: 0\nK_list: [4, 6]\nD_list: [4]\nprobe: 2\n")
        code, out, _ = run(capsys, "ladder", "--config", str(cfg), "--out-dir", str(tmp_path / "o"))
        assert code == EXIT_OK and "D=4" in out

    def test_bad_config(self, capsys, tmp_path):
        cfg = tmp_path / "ladder.json"
        cfg.write_text('{"K_list": [4, 6], "colour": "red"}')
        assert run(capsys, "ladder", "--config", str(cfg), "--out-dir", str(tmp_path / "o"))[0] == EXIT_INPUT
        assert run(capsys, *self.ARGS[:-4], "--probe", "9", "--out-dir", str(tmp_path / "o"))[0] == EXIT_INPUT

    def test_out_dir_is_file(self, capsys, tmp_path):
        f = tmp_path / "file"
        f.write_text("")
        assert run(capsys, *self.ARGS, "--out-dir", str(f))[0] == EXIT_IO

    def test_unconverged_points_exit_3(self, capsys, tmp_path):
        code, out, _ = run(capsys, *self.ARGS[:-2], "--ed-max-K", "4", "--out-dir", str(tmp_path / "o"))
        assert code == EXIT_OK
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"dmrg_max_sweeps": 1}))
        code, out, _ = run(capsys, *self.ARGS[:-2], "--ed-max-K", "4", "--config", str(cfg), "--out-dir", str(tmp_path / "p"))
        assert code == EXIT_SOLVER and "did not converge" in out
        assert (tmp_path / "p" / "report.json").exists()


@pytest.mark.skipif(shutil.which("fmps") is None, reason="console script not installed")
def test_console_script(tmp_path):
    res = subprocess.run(["fmps", "solve", "--model", "hubbard:L=2,U=8"], capture_output=True, text=True)
    assert res.returncode == 0
    assert abs(float(res.stdout.split()[1]) - oracles.hubbard_dimer_energy(1, 8)) < 1e-12
    res = subprocess.run(["fmps", "solve", "--fcidump", str(tmp_path / "missing")], capture_output=True, text=True)
    assert res.returncode == 4
