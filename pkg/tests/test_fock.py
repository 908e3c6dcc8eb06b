import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmps.fock import (
    FockSector,
    OccupationLabel,
    SectorError,
    StateVector,
    apply_annihilation,
    apply_creation,
    embed_full,
    enumerate_sector,
    label_rank,
    project_mask,
    rank_label,
    sector_labels,
    two_sz_of,
)

import oracles


class TestOccupationLabel:
    def test_string_round_trip(self):
        lab = OccupationLabel.from_string("0110")
        assert lab.value == 6 and lab.K == 4
        assert str(lab) == "0110"
        assert lab.bits == (0, 1, 1, 0)
        assert lab.n_particles == 2

    def test_orbital_one_is_most_significant(self):
        lab = OccupationLabel.from_string("1000")
        assert lab.occupied(1) and not lab.occupied(4)
        assert lab.value == 8

    def test_lexicographic_order_is_integer_order(self):
        labs = [OccupationLabel.from_string(s) for s in oracles.bitstrings(5)]
        assert [l.value for l in labs] == list(range(32))

    @pytest.mark.parametrize("bad", ["012", "1a"])
    def test_rejects_non_bits(self, bad):
        with pytest.raises(ValueError):
            OccupationLabel.from_string(bad)

    def test_value_must_fit(self):
        with pytest.raises(ValueError):
            OccupationLabel(16, 4)

    def test_orbital_range(self):
        with pytest.raises(IndexError):
            OccupationLabel.from_string("01").occupied(3)


class TestSector:
    @pytest.mark.parametrize("K,N,two_sz", [(6, None, None), (6, 3, None), (6, 3, 1), (8, 4, 0), (8, None, -2), (4, 0, 0)])
    def test_labels_match_string_enumeration(self, K, N, two_sz):
        sec = FockSector(K, N, two_sz)
        np.testing.assert_array_equal(sector_labels(sec), oracles.labels_in_sector(K, N, two_sz))
        assert sec.dim == len(oracles.labels_in_sector(K, N, two_sz))

    def test_fixed_n_dimension(self):
        assert FockSector(10, 4).dim == comb(10, 4)

    @pytest.mark.parametrize("args", [(4, 5, None), (4, 2, 1), (5, 1, 1), (4, 4, 2), (4, None, 3)])
    def test_invalid_sectors(self, args):
        with pytest.raises(SectorError):
            FockSector(*args)

    def test_rank_and_unrank(self):
        sec = FockSector(8, 4, 0)
        for i, lab in enumerate(enumerate_sector(sec)):
            assert label_rank(lab, sec) == i
            assert rank_label(i, sec) == lab

    def test_rank_outside_sector(self):
        with pytest.raises(SectorError):
            label_rank(OccupationLabel.from_string("1110"), FockSector(4, 2))
        with pytest.raises(SectorError):
            rank_label(6, FockSector(4, 2))

    def test_two_sz(self):
        # odd positions are spin up
        assert two_sz_of(int("1000", 2), 4) == 1
        assert two_sz_of(int("0100", 2), 4) == -1
        assert two_sz_of(int("1100", 2), 4) == 0


class TestOperators:
    @pytest.mark.parametrize("K", [1, 3, 5])
    def test_creation_matches_kronecker_matrices(self, K):
        for i in range(1, K + 1):
            M = oracles.creation_matrix(i, K)
            for v in range(1 << K):
                res = apply_creation(i, OccupationLabel(v, K))
                col = M[:, v]
                if res is None:
                    assert not col.any()
                else:
                    lab, sign = res
                    assert col[lab.value] == sign and np.count_nonzero(col) == 1

    @pytest.mark.parametrize("K", [2, 4])
    def test_annihilation_matches_transpose(self, K):
        for i in range(1, K + 1):
            M = oracles.creation_matrix(i, K).T
            for v in range(1 << K):
                res = apply_annihilation(i, OccupationLabel(v, K))
                col = M[:, v]
                if res is None:
                    assert not col.any()
                else:
                    assert col[res[0].value] == res[1]

    def test_sign_counts_earlier_orbitals(self):
        lab, sign = apply_creation(3, OccupationLabel.from_string("1100"))
        assert str(lab) == "1110" and sign == 1
        lab, sign = apply_creation(3, OccupationLabel.from_string("1000"))
        assert str(lab) == "1010" and sign == -1

    @settings(max_examples=60, deadline=None)
    @given(K=st.integers(2, 7), data=st.data())
    def test_anticommutation(self, K, data):
        i = data.draw(st.integers(1, K))
        j = data.draw(st.integers(1, K))
        v = data.draw(st.integers(0, (1 << K) - 1))

        def act(ops, value):
            terms = {value: 1}
            for kind, o in reversed(ops):
                new = {}
                for val, c in terms.items():
                    f = apply_creation if kind == "c" else apply_annihilation
                    r = f(o, OccupationLabel(val, K))
                    if r is not None:
                        new[r[0].value] = new.get(r[0].value, 0) + c * r[1]
                terms = new
            return terms

        a = act([("c", i), ("a", j)], v)
        b = act([("a", j), ("c", i)], v)
        total = {k: a.get(k, 0) + b.get(k, 0) for k in set(a) | set(b)}
        expected = {v: 1} if i == j else {}
        assert {k: c for k, c in total.items() if c} == expected


class TestStateVector:
    def test_from_amplitudes(self):
        s = StateVector.from_amplitudes(3, {"101": 0.6, "011": 0.8j})
        assert s.amplitude("101") == 0.6
        assert s.amplitude("011") == 0.8j
        assert abs(s.norm() - 1.0) < 1e-15

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            StateVector(FockSector(3), np.ones(7))

    def test_normalized_flag_checked(self):
        with pytest.raises(ValueError):
            StateVector(FockSector(2), np.ones(4), normalized=True)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            StateVector(FockSector(1), np.array([np.nan, 1.0]))

    def test_zero_normalize(self):
        with pytest.raises(ValueError):
            StateVector(FockSector(2), np.zeros(4)).normalize()

    def test_embed_full(self, rng):
        sec = FockSector(6, 3, 1)
        c = rng.standard_normal(sec.dim)
        full = embed_full(StateVector(sec, c))
        idx = oracles.labels_in_sector(6, 3, 1)
        np.testing.assert_array_equal(full.coeffs[idx], c)
        assert np.count_nonzero(full.coeffs) == np.count_nonzero(c)

    @pytest.mark.parametrize("k", range(0, 6))
    def test_project_mask_against_string_filter(self, rng, k):
        K = 5
        psi = rng.standard_normal(1 << K)
        out = project_mask(StateVector(FockSector(K), psi), k).coeffs
        for idx, s in enumerate(oracles.bitstrings(K)):
            expect = psi[idx] if "1" not in s[k:] else 0.0
            assert out[idx] == expect

    def test_project_mask_in_sector(self, rng):
        sec = FockSector(6, 2)
        psi = rng.standard_normal(sec.dim)
        out = embed_full(project_mask(StateVector(sec, psi), 3)).coeffs
        full = embed_full(StateVector(sec, psi)).coeffs
        for idx, s in enumerate(oracles.bitstrings(6)):
            assert out[idx] == (full[idx] if "1" not in s[3:] else 0.0)


def test_sector_union_covers_full_space():
    K = 6
    parts = [sector_labels(FockSector(K, n, s)) for n in range(K + 1) for s in range(-3, 4)
             if abs(s) <= n and (n - s) % 2 == 0 and (n + s) // 2 <= 3 and (n - s) // 2 <= 3]
    allv = np.sort(np.concatenate(parts))
    np.testing.assert_array_equal(allv, np.arange(1 << K))
    assert len(list(itertools.chain(*parts))) == 1 << K
