import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semms.data import Dataset, Family, encode_groups, load_dataset, standardize, write_dataset
from semms.exceptions import DataError


def _write(path, header, rows):
    path.write_text(",".join(header) + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")
    return path


def test_load_basic(tmp_path):
    p = _write(tmp_path / "d.csv", ["y", "g", "t", "a", "b"],
               [[1.0, "s1", 0, 0.1, 2], [2.0, "s1", 1, 0.3, 1], [3.5, "s2", 0, -0.2, 0]])
    d = load_dataset(p, 0, [3, 4], group_col=1, slope_col=2)
    assert d.n == 3 and d.K == 2
    np.testing.assert_array_equal(d.y, [1.0, 2.0, 3.5])
    np.testing.assert_array_equal(d.group, [0, 0, 1])
    assert d.group_labels == ("s1", "s2")
    assert d.z_names == ("a", "b")
    np.testing.assert_array_equal(d.X, np.ones((3, 1)))


def test_load_rejects_overlap(tmp_path):
    p = _write(tmp_path / "d.csv", ["y", "a", "b"], [[1, 2, 3], [2, 3, 5]])
    with pytest.raises(DataError, match=r"column 2 \(z/group\)"):
        load_dataset(p, 0, [1, 2], group_col=1)


def test_load_reports_bad_cell(tmp_path):
    p = _write(tmp_path / "d.csv", ["y", "a"], [[1, 2], [2, "oops"]])
    with pytest.raises(DataError, match=r"row 2, column 2 \('a'\)"):
        load_dataset(p, 0, [1])


def test_load_missing_file(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        load_dataset(tmp_path / "nope.csv", 0, [1])


def test_encode_groups_first_appearance():
    codes, labels = encode_groups(["b", "a", "b", "c", "a"])
    np.testing.assert_array_equal(codes, [0, 1, 0, 2, 1])
    assert labels == ("b", "a", "c")


def test_family_checks():
    with pytest.raises(DataError, match="0/1"):
        Dataset(y=[0, 2.0], X=np.ones(2), Z=np.zeros((2, 1)), family="binomial")
    with pytest.raises(DataError, match="non-negative integers"):
        Dataset(y=[0, 1.5], X=np.ones(2), Z=np.zeros((2, 1)), family="p")
    assert Family.parse("b") is Family.BINOMIAL


def test_standardize_rejects_constant():
    d = Dataset(y=np.arange(4.0), X=np.ones(4), Z=np.column_stack([np.arange(4.0), np.ones(4)]))
    with pytest.raises(DataError, match="V2"):
        standardize(d)


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 40), st.integers(1, 6), st.floats(-1e3, 1e3), st.floats(1e-2, 1e3),
       st.integers(0, 2**31 - 1))
def test_standardize_moments(n, K, shift, scale, seed):
    Z = shift + scale * np.random.default_rng(seed).standard_normal((n, K))
    s = standardize(Dataset(y=np.zeros(n), X=np.ones(n), Z=Z))
    np.testing.assert_allclose(s.Z.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(s.Z.std(0, ddof=1), 1.0, atol=1e-12)
    assert s.standardized


def test_write_load_roundtrip(tmp_path, rng):
    n = 12
    d = Dataset(y=rng.standard_normal(n), X=np.ones(n), Z=rng.standard_normal((n, 3)),
                group=np.repeat(np.arange(3), 4), slope_covariate=np.tile(np.arange(4.0), 3),
                group_labels=("x", "y", "z"))
    write_dataset(d, tmp_path / "o.csv")
    back = load_dataset(tmp_path / "o.csv", 0, [3, 4, 5], group_col=1, slope_col=2)
    np.testing.assert_array_equal(back.y, d.y)
    np.testing.assert_array_equal(back.Z, d.Z)
    np.testing.assert_array_equal(back.group, d.group)
    np.testing.assert_array_equal(back.slope_covariate, d.slope_covariate)
