import json

import numpy as np
import pytest

from fmps.convergence import (
    LadderConfig,
    config_hash,
    default_ladder,
    format_spectrum_table,
    pad_site,
    parse_spectrum_table,
    plateau,
    run_ladder,
    spectrum_distance,
    tail_fit,
    tensor_distance,
)
from fmps.hamiltonian import DecayingInteraction, HubbardChain


def small_ladder(**kw):
    base = dict(model=DecayingInteraction(L=6), N=4, two_sz=0, K_list=(6, 8, 10, 12), D_list=(8, 16),
                probe=3, ed_max_K=8)
    base.update(kw)
    return LadderConfig(**base)


@pytest.fixture(scope="module")
def report():
    return run_ladder(small_ladder())


class TestMetrics:
    def test_spectrum_distance_pads(self):
        assert spectrum_distance([0.6, 0.8], [0.6, 0.8]) == 0.0
        assert spectrum_distance([1.0], [0.6, 0.8]) == pytest.approx(np.hypot(0.4, 0.8))

    def test_pad_site_keeps_last_index_last(self):
        a = np.arange(2 * 2 * 2, dtype=float).reshape(2, 2, 2)
        p = pad_site(a, 3, 4)
        np.testing.assert_array_equal(p[[0, 2]][:, :, [0, 3]], a)
        assert not p[1].any() and not p[:, :, 1:3].any()
        with pytest.raises(ValueError):
            pad_site(a, 1, 4)

    def test_tensor_distance(self):
        a = [np.ones((1, 2, 2))]
        b = [np.ones((1, 2, 3)), np.ones((3, 2, 1))]
        d = tensor_distance(a, b)
        assert d[1] is None
        assert d[0] == pytest.approx(np.sqrt(2.0))

    @pytest.mark.parametrize("deltas,K_star,length,mono", [
        ([3.0, 2.0, 1.0], 4, 3, True),
        ([1.0, 2.0, 1.5, 0.5], 6, 3, False),
        ([1.0, 2.0], 6, 1, False),
        ([], None, 0, True),
    ])
    def test_plateau(self, deltas, K_star, length, mono):
        Ks = [2, 4, 6, 8, 10][: len(deltas) + 1]
        out = plateau(Ks, deltas)
        assert out == {"K_star": K_star, "tail_length": length, "monotone_tail": mono}

    def test_tail_fit_exact_exponential(self):
        v = np.exp(-0.7 * np.arange(1, 9))
        fit = tail_fit(v)
        assert fit["slope"] == pytest.approx(-0.7)
        assert fit["rms_residual"] < 1e-12 and fit["n"] == 8
        assert tail_fit([1.0]) is None

    def test_tail_fit_floor(self):
        fit = tail_fit([0.9, 0.1, 1e-14, 0.0])
        assert fit["n"] == 2


class TestTables:
    def test_round_trip(self):
        vals = np.array([0.9, 0.4, 1e-5 / 3])
        text = format_spectrum_table(vals, 12, 16, 4, meta="fmps test")
        lines = text.splitlines()
        assert lines[0] == "# K=12 D=16 bond=4" and lines[1] == "# fmps test"
        header, back = parse_spectrum_table(text)
        assert header == {"K": 12, "D": 16, "bond": 4}
        np.testing.assert_array_equal(back, vals)

    def test_bell_values(self):
        text = format_spectrum_table([2 ** -0.5, 2 ** -0.5], 2, 2, 1)
        assert text.splitlines()[1] == "7.0710678118654757e-01"


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            small_ladder(K_list=(8, 6))
        with pytest.raises(ValueError):
            small_ladder(K_list=(7, 9))
        with pytest.raises(ValueError):
            small_ladder(probe=6)
        with pytest.raises(ValueError):
            small_ladder(D_list=())

    def test_default(self):
        cfg = default_ladder()
        assert cfg.K_list == (8, 12, 16, 20, 24) and cfg.probe == 4
        assert cfg.solver_for(20) == "ed" and cfg.solver_for(24) == "dmrg"

    def test_hash_ignores_workers(self):
        assert config_hash(small_ladder(workers=3)) == config_hash(small_ladder())
        assert config_hash(small_ladder(seed=1)) != config_hash(small_ladder())

    def test_model_too_small(self):
        with pytest.raises(ValueError):
            run_ladder(small_ladder(model=HubbardChain(4)))


class TestLadder:
    def test_points_and_solvers(self, report):
        assert [(p.K, p.D) for p in report.points] == [(K, D) for K in (6, 8, 10, 12) for D in (8, 16)]
        assert all(p.ok and p.converged for p in report.points)
        assert {p.solver for p in report.points if p.K <= 8} == {"ed"}
        assert {p.solver for p in report.points if p.K > 8} == {"dmrg"}
        assert not report.warnings

    def test_pointwise_invariants(self, report):
        for p in report.points:
            assert p.left_normal_dev < 1e-12
            n = len(p.spectrum.values)
            assert n <= min(2 ** 3, 2 ** (p.K - 3), p.D)
            assert abs(np.sum(p.spectrum.values ** 2) - 1) < 1e-12
            if p.solver == "ed":
                assert p.projection_error < 1e-10

    def test_retained_weight_grows_with_D(self, report):
        for K in (6, 8, 10, 12):
            assert report.point(K, 16).retained_weight >= report.point(K, 8).retained_weight - 1e-12

    def test_ed_and_dmrg_energies_continue(self, report):
        # energies decrease (variationally) as orbitals are added
        e = [report.point(K, 16).energy for K in (6, 8, 10, 12)]
        assert all(b <= a + 1e-9 for a, b in zip(e, e[1:]))

    def test_distances_and_tail(self, report):
        for D in (8, 16):
            entry = report.distances[f"D={D}"]
            assert entry["K"] == [6, 8, 10, 12] and len(entry["delta"]) == 3
        assert report.tail["K"] == 12 and report.tail["slope"] < 0

    def test_write_and_json(self, report, tmp_path):
        paths = report.write(tmp_path)
        assert (tmp_path / "report.json") in paths
        data = json.loads((tmp_path / "report.json").read_text())
        assert data["meta"]["config_hash"] == config_hash(report.config)
        assert len(data["points"]) == 8
        header, vals = parse_spectrum_table((tmp_path / "spectra" / "K12_D16.txt").read_text())
        assert header == {"K": 12, "D": 16, "bond": 3}
        np.testing.assert_array_equal(vals, report.point(12, 16).spectrum.values)

    def test_rerun_byte_identical(self, report, tmp_path):
        again = run_ladder(small_ladder())
        report.write(tmp_path / "a")
        again.write(tmp_path / "b")
        for f in sorted((tmp_path / "a" / "spectra").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / "spectra" / f.name).read_bytes()
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()

    def test_worker_pool_gives_same_tables(self, report, tmp_path):
        pooled = run_ladder(small_ladder(K_list=(6, 8, 10), workers=2))
        serial = run_ladder(small_ladder(K_list=(6, 8, 10)))
        assert pooled.to_json() == serial.to_json()

    def test_failures_are_recorded(self, monkeypatch):
        import fmps.convergence as conv

        def boom(*args, **kwargs):
            raise RuntimeError("solver exploded")

        monkeypatch.setattr(conv, "dmrg_ground_state", boom)
        rep = run_ladder(small_ladder(K_list=(6, 8, 10)))
        bad = [p for p in rep.points if not p.ok]
        assert [(p.K, p.D) for p in bad] == [(10, 8), (10, 16)]
        assert all("solver exploded" in p.error for p in bad)
        assert len(rep.warnings) == 2
        assert rep.distances["D=8"]["K"] == [6, 8]

    def test_invalid_sector_raises_early(self):
        with pytest.raises(ValueError):
            run_ladder(small_ladder(N=7, two_sz=1, K_list=(6, 8)))
