import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calm.data import (
    PropensitySpec,
    RctDataset,
    dump_dataset,
    lambda_t,
    load_dataset,
    load_propensity,
    quartile_strata,
    split_folds,
)
from calm.errors import DomainError, ParseError

BALANCED = PropensitySpec.balanced(2)

CSV4 = b"""id,y,t,x1,x2
a,1.0,1,0.1,0.2
b,2.5,2,-0.3,1.0
c,0.0,1,2.0,0.0
d,-1.5,2,0.5,-0.5
"""


class TestLoadDataset:
    def test_valid_four_rows(self):
        ds = load_dataset(CSV4, BALANCED)
        assert ds.n == 4 and ds.p == 2 and ds.arm_count == 2
        assert ds.z == ("",) * 4
        assert ds.ids == ("a", "b", "c", "d")

    def test_arm_out_of_range(self):
        bad = CSV4.replace(b"c,0.0,1", b"c,0.0,3")
        with pytest.raises(DomainError):
            load_dataset(bad, BALANCED)

    def test_missing_y_column_named(self):
        bad = b"id,t,x1\na,1,0.5\n"
        with pytest.raises(ParseError) as info:
            load_dataset(bad, BALANCED)
        assert "'y'" in str(info.value) and info.value.column == "y"

    def test_non_numeric_x_reports_row(self):
        bad = CSV4.replace(b"-0.3", b"abc")
        with pytest.raises(ParseError) as info:
            load_dataset(bad, BALANCED)
        assert info.value.row == 1

    def test_duplicate_id(self):
        bad = CSV4.replace(b"d,-1.5", b"a,-1.5")
        with pytest.raises(DomainError):
            load_dataset(bad, BALANCED)

    def test_stream_source_and_optional_columns(self):
        text = "id,y,t,x1,xc,z\na,1,1,0.5,2,hello\nb,2,2,0.1,1,world\n"
        ds = load_dataset(io.BytesIO(text.encode()), BALANCED)
        assert ds.z == ("hello", "world")
        assert ds.x_coarse.tolist() == [2, 1]

    def test_arrays_are_read_only(self):
        ds = load_dataset(CSV4, BALANCED)
        with pytest.raises(ValueError):
            ds.y[0] = 5.0


class TestRoundTrip:
    def test_dump_then_load_is_identical(self, small_trial):
        ds = small_trial.dataset
        again = load_dataset(dump_dataset(ds), ds.propensity)
        assert again == ds

    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.floats(-1e6, 1e6, allow_nan=False),
                st.integers(1, 2),
                st.floats(-1e3, 1e3, allow_nan=False),
                st.text(alphabet="abc ,\"xyz", max_size=6),
            ),
            min_size=1,
            max_size=20,
        )
    )
    def test_round_trip_property(self, rows):
        ds = RctDataset(
            ids=tuple(f"r{i}" for i in range(len(rows))),
            y=np.array([r[0] for r in rows]),
            t=np.array([r[1] for r in rows]),
            x=np.array([[r[2]] for r in rows]),
            propensity=BALANCED,
            z=tuple(r[3] for r in rows),
        )
        assert load_dataset(dump_dataset(ds), BALANCED) == ds


class TestPropensity:
    @pytest.mark.parametrize("e,lam", [(0.5, 1.0), (0.25, 3.0)])
    def test_lambda(self, e, lam):
        spec = PropensitySpec(2, constant=(e, 1 - e))
        assert lambda_t(spec, 1) == pytest.approx(lam, abs=1e-15)

    def test_balanced_two_arm_lambda_is_one(self):
        assert lambda_t(PropensitySpec.balanced(2), 2) == 1.0

    def test_lambda_bad_arm(self):
        with pytest.raises(DomainError):
            lambda_t(BALANCED, 3)

    def test_overlap_violation_rejected(self):
        with pytest.raises(DomainError):
            PropensitySpec(2, constant=(0.995, 0.005))

    def test_rows_must_sum_to_one(self):
        with pytest.raises(DomainError):
            PropensitySpec(2, constant=(0.5, 0.4))

    def test_stratum_table_json(self):
        doc = {"strata": {"1": {"1": 0.5, "2": 0.5}, "2": {"1": 0.25, "2": 0.75}}}
        spec = load_propensity(json.dumps(doc))
        assert spec.needs_strata
        e = spec.matrix(3, np.array([1, 2, 2]))
        assert e[:, 0].tolist() == [0.5, 0.25, 0.25]
        assert lambda_t(spec, 1, 2) == pytest.approx(3.0)
        assert spec.to_json() == doc

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.05, 1.0), min_size=2, max_size=5))
    def test_per_subject_probabilities_sum_to_one(self, raw):
        p = np.array(raw) / np.sum(raw)
        p = np.clip(p, 0.01, 0.99)
        p[-1] = 1 - p[:-1].sum()
        if not (0.01 <= p[-1] <= 0.99):
            return
        spec = PropensitySpec(len(p), constant=tuple(p))
        assert abs(spec.matrix(4).sum(axis=1) - 1).max() <= 1e-12

    def test_missing_stratum_for_subject(self):
        spec = PropensitySpec(2, table={1: (0.5, 0.5)})
        with pytest.raises(DomainError):
            spec.matrix(2, np.array([1, 2]))


class TestSplitFolds:
    def test_even_split(self):
        f = split_folds(10, 2, 3)
        assert sorted(f.sizes()) == [5, 5]

    def test_remainder(self):
        assert sorted(split_folds(10, 3, 9).sizes()) == [3, 3, 4]

    def test_deterministic(self):
        a, b = split_folds(100, 2, 7), split_folds(100, 2, 7)
        assert np.array_equal(a.fold_of, b.fold_of)

    @pytest.mark.parametrize("n,K", [(5, 1), (3, 4)])
    def test_invalid_K(self, n, K):
        with pytest.raises(DomainError):
            split_folds(n, K, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 200), st.integers(2, 7), st.integers(0, 2**32 - 1))
    def test_partition_property(self, n, K, seed):
        if K > n:
            return
        f = split_folds(n, K, seed)
        sizes = f.sizes()
        assert sum(sizes) == n and max(sizes) - min(sizes) <= 1
        assert set(np.unique(f.fold_of)) == set(range(1, K + 1))

    def test_fold_frequency_over_seeds(self):
        n, K, S = 30, 3, 1000
        counts = np.zeros((n, K))
        for s in range(S):
            f = split_folds(n, K, s)
            counts[np.arange(n), f.fold_of - 1] += 1
        freq = counts / S
        se = np.sqrt((1 / K) * (1 - 1 / K) / S)
        assert np.abs(freq - 1 / K).max() < 5 * se


class TestCoarsening:
    def test_quartile_codes(self):
        rng = np.random.default_rng(0)
        codes = quartile_strata(rng.standard_normal((400, 3)))
        assert codes.min() == 1 and codes.max() == 16
        assert len(np.unique(codes)) == 16

    def test_one_dimension(self):
        codes = quartile_strata(np.arange(8.0))
        assert codes.tolist() == [1, 1, 2, 2, 3, 3, 4, 4]

    def test_default_coarsening_used_when_absent(self):
        ds = load_dataset(CSV4, BALANCED)
        assert ds.x_coarse is None
        assert ds.coarse_codes().shape == (4,)
