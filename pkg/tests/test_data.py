import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from r2ive.data import Annihilator, CsvSchema, Dataset, load_csv, residualize, write_csv
from r2ive.errors import DimensionError, InputError, ParseError, SchemaError, SingularDesignError
from r2ive.simulation import generate_dataset, preset


def _write(path, text):
    path.write_text(text)
    return path


def test_load_three_rows_with_glob(tmp_path):
    f = _write(tmp_path / "a.csv", "y,d,z1,z2\n1,2,3,4\n5,6,7,8\n9,10,11,12\n")
    ds = load_csv(f, {"outcome": "y", "treatment": "d", "instruments": ["z*"]})
    assert (ds.n, ds.L) == (3, 2)
    assert ds.instrument_names == ("z1", "z2")
    np.testing.assert_array_equal(ds.Z[:, 1], [4, 8, 12])


def test_parse_error_names_row_and_column(tmp_path):
    f = _write(tmp_path / "a.csv", "y,d,z1\n1,2,3\n4,abc,6\n")
    with pytest.raises(ParseError) as info:
        load_csv(f, CsvSchema("y", "d", ["z1"]))
    assert info.value.row == 2 and info.value.column == "d"
    assert "row 2" in str(info.value) and "'d'" in str(info.value)


def test_missing_column_and_empty_file(tmp_path):
    f = _write(tmp_path / "a.csv", "y,d,z1\n1,2,3\n4,5,6\n")
    with pytest.raises(SchemaError, match="w"):
        load_csv(f, CsvSchema("y", "w", ["z1"]))
    with pytest.raises(SchemaError):
        load_csv(f, CsvSchema("y", "d", ["q*"]))
    with pytest.raises(InputError):
        load_csv(_write(tmp_path / "e.csv", ""), CsvSchema("y", "d", ["z1"]))


def test_round_trip_is_bit_identical(tmp_path):
    ds, _ = generate_dataset(preset("linear-s2-10", n=50), 3)
    schema = write_csv(ds, tmp_path / "rt.csv")
    back = load_csv(tmp_path / "rt.csv", schema)
    for a in ("Y", "D", "Z"):
        assert np.array_equal(getattr(ds, a), getattr(back, a))


def test_dataset_rejects_bad_input():
    with pytest.raises(InputError):
        Dataset(Y=[1.0, np.nan], D=[1.0, 2.0], Z=[[1.0], [2.0]])
    with pytest.raises(InputError):
        Dataset(Y=[1.0], D=[1.0], Z=[[1.0]])
    with pytest.raises(InputError):
        Dataset(Y=[1.0, 2.0, 3.0], D=[1.0, 2.0], Z=[[1.0], [2.0], [3.0]])
    ds = Dataset(Y=[1.0, 2.0], D=[1.0, 2.0], Z=[[1.0], [3.0]])
    with pytest.raises(ValueError):
        ds.Y[0] = 5.0


def test_centering_without_covariates():
    ds = Dataset(Y=[1.0, 2.0, 3.0], D=[0.0, 1.0, 5.0], Z=[[1.0], [2.0], [4.0]])
    c = residualize(ds)
    np.testing.assert_allclose(c.Y, [-1.0, 0.0, 1.0], atol=1e-15)
    assert c.residualization == "intercept"
    assert np.all(np.abs(c.Z.mean(axis=0)) <= 1e-10)


def test_covariate_column_as_outcome_is_annihilated():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 3))
    ds = Dataset(Y=X[:, 1], D=rng.normal(size=40), Z=rng.normal(size=(40, 4)), X=X)
    assert np.linalg.norm(residualize(ds).Y) <= 1e-10


def test_rank_deficient_and_too_many_covariates():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 2))
    X = np.column_stack([X, X[:, 0] + X[:, 1]])
    ds = Dataset(Y=rng.normal(size=30), D=rng.normal(size=30), Z=rng.normal(size=(30, 2)), X=X)
    with pytest.raises(SingularDesignError):
        residualize(ds)
    ds = Dataset(Y=rng.normal(size=4), D=rng.normal(size=4), Z=rng.normal(size=(4, 2)),
                 X=rng.normal(size=(4, 3)))
    with pytest.raises(DimensionError):
        residualize(ds)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(8, 60), p=st.integers(0, 4), seed=st.integers(0, 2 ** 31))
def test_residualize_idempotent_and_orthogonal(n, p, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p)) * rng.uniform(0.1, 10, size=p) if p else None
    ds = Dataset(Y=rng.normal(size=n) + 3, D=rng.normal(size=n), Z=rng.normal(size=(n, 3)), X=X)
    c = residualize(ds)
    twice = residualize(Dataset(Y=c.Y, D=c.D, Z=c.Z, X=X))
    for a in ("Y", "D", "Z"):
        assert np.max(np.abs(getattr(twice, a) - getattr(c, a))) <= 1e-12
        v = getattr(c, a)
        assert np.max(np.abs(v.mean(axis=0))) <= 1e-10
        if X is not None:
            assert np.max(np.abs(X.T @ v)) / n <= 1e-8


def test_annihilator_matches_explicit_projection():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(20, 3))
    v = rng.normal(size=20)
    M = np.eye(20) - A @ np.linalg.solve(A.T @ A, A.T)
    np.testing.assert_allclose(Annihilator(A)(v), M @ v, atol=1e-12)
