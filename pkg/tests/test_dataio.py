import numpy as np
import pytest

from bkmrcma.errors import InputError, SchemaError
from bkmrcma.dataio import (ColumnRoles, ColumnTransform, fmt, load_dataset, load_draws, read_rows, read_table,
                            save_draws, write_json, write_rows)
from bkmrcma.model import KernelInputs
from bkmrcma.sampler import McmcConfig, fit_bkmr


def _csv(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_read_table_and_missing_column(tmp_path):
    p = _csv(tmp_path, "y,a,b,m\n1,2,3,4\n2,3,4,5\n3,1,2,1\n")
    header, cols = read_table(p)
    assert header == ["y", "a", "b", "m"]
    assert cols["b"].values().tolist() == [3.0, 4.0, 2.0]
    with pytest.raises(SchemaError, match="'mn' \\(mediator\\)"):
        load_dataset(p, ColumnRoles("y", ("a", "b"), mediator="mn"))


def test_bad_cells(tmp_path):
    p = _csv(tmp_path, "y,a\n1,2\n2,x\n")
    with pytest.raises(SchemaError, match="a"):
        load_dataset(p, ColumnRoles("y", ("a",)))
    p = _csv(tmp_path, "y,a\n1,2\n2,nan\n", "e.csv")
    with pytest.raises(SchemaError):
        load_dataset(p, ColumnRoles("y", ("a",)))


def test_roles_must_be_disjoint():
    with pytest.raises(SchemaError):
        ColumnRoles("y", ("a", "b"), mediator="a")
    with pytest.raises(SchemaError):
        ColumnRoles("y", ())


def test_transform_roundtrip():
    t = ColumnTransform(log=True, center=0.4, scale=2.0)
    x = np.array([0.5, 1.0, 7.0])
    np.testing.assert_allclose(t.inverse(t.forward(x)), x, rtol=1e-14)
    with pytest.raises(InputError):
        t.forward([0.0])


def test_load_with_transforms(tmp_path):
    p = _csv(tmp_path, "y,a,b,m,age\n1,2,3,4,30\n2,4,5,5,40\n3,8,2,1,50\n")
    roles = ColumnRoles("y", ("a", "b"), mediator="m", modifiers=("age",))
    ds, rec = load_dataset(p, roles, {"log": ["exposures"], "center": ["all"], "scale": ["exposures"]})
    la = np.log([2.0, 4.0, 8.0])
    np.testing.assert_allclose(ds.z[:, 0], (la - la.mean()) / la.std(ddof=1))
    assert ds.y.tolist() == [-1.0, 0.0, 1.0]
    assert rec.get("age").center == 40.0 and rec.get("age").scale is None
    assert rec.effect_scale("y") == 1.0
    np.testing.assert_allclose(rec.to_raw(["a", "b"], rec.to_model(["a", "b"], [3.0, 4.0])), [3.0, 4.0])
    with pytest.raises(SchemaError):
        load_dataset(p, roles, {"log": ["zinc"]})
    with pytest.raises(InputError):
        load_dataset(p, roles, {"winsorize": ["a"]})


def test_writers(tmp_path):
    assert fmt(None) == "" and fmt(0.1) == "0.1" and fmt(1 / 3) == repr(1 / 3) and fmt("x") == "x"
    path = write_rows(tmp_path / "t.csv", [{"a": 1.5, "b": None}, {"a": "q,r", "b": 2}], ["a", "b"])
    raw = path.read_bytes()
    assert raw.startswith(b"a,b\r\n1.5,\r\n")
    rows = read_rows(path)
    assert rows == [{"a": "1.5", "b": ""}, {"a": "q,r", "b": "2"}]
    j = write_json(tmp_path / "x.json", {"b": np.float64(1.0), "a": np.arange(2)})
    assert j.read_text().startswith('{\n  "a": [\n')


def test_draws_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    z = rng.standard_normal((20, 2))
    from bkmrcma.model import Dataset

    ds = Dataset(y=z[:, 0] + rng.standard_normal(20), z=z, m=rng.standard_normal(20))
    fit = fit_bkmr(ds, KernelInputs.for_dataset(ds, mediator=True), mcmc=McmcConfig(iterations=40, seed=1))
    back = load_draws(save_draws(tmp_path / "f.npz", fit))
    for name in ("beta", "sigma2", "lam", "rho", "r", "delta"):
        assert np.array_equal(getattr(back, name), getattr(fit, name))
    assert back.kernel_inputs == fit.kernel_inputs and back.mode == fit.mode
    assert np.array_equal(back.dataset.m, ds.m)
