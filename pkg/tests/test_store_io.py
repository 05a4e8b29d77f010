import numpy as np
import pytest

from cosin.gibbs import run_chain
from cosin.io import InputError, read_config, read_mask, read_matrix, write_config, write_mask, write_matrix
from cosin.model import CountMatrix, Covariates, HyperParams
from cosin.store import load_store, save_store


@pytest.fixture(scope="module")
def store():
    g = np.random.default_rng(0)
    y = g.poisson(3, size=(9, 7))
    cov = Covariates(np.column_stack([np.ones(9), g.standard_normal(9)]), np.ones((7, 1)), (np.arange(7) < 3).astype(float))
    return run_chain(CountMatrix(y), cov, HyperParams(iterations=400, burn_in=100, thin=5, seed=3))


@pytest.mark.parametrize("fmt", ["binary", "csv"])
def test_store_round_trip(store, tmp_path, fmt):
    save_store(store, tmp_path / "d", fmt=fmt)
    back = load_store(tmp_path / "d")
    assert len(back) == len(store) and back.meta == store.meta
    assert len(set(store.k_star)) >= 1
    for a, b in zip(store, back):
        assert a.iteration == b.iteration
        for f in ("beta", "sigma2", "eta", "lam", "GammaT", "GammaB", "rho"):
            assert np.array_equal(getattr(a, f), getattr(b, f)), f


def test_binary_layout_is_little_endian_row_major(store, tmp_path):
    save_store(store, tmp_path / "d")
    raw = np.fromfile(tmp_path / "d" / "beta.f64", dtype="<f8")
    d0 = store[0].beta
    assert np.array_equal(raw[: d0.size].reshape(d0.shape), d0)


def test_store_errors(store, tmp_path):
    with pytest.raises(InputError):
        load_store(tmp_path)
    (tmp_path / "d").mkdir()
    save_store(store, tmp_path / "d")
    with open(tmp_path / "d" / "eta.f64", "ab") as fh:
        fh.write(b"\0" * 8)
    with pytest.raises(InputError, match="eta"):
        load_store(tmp_path / "d")


def test_matrix_round_trip_full_precision(tmp_path):
    a = np.random.default_rng(1).standard_normal((4, 3)) * 1e-7
    write_matrix(tmp_path / "a.csv", a)
    assert np.array_equal(read_matrix(tmp_path / "a.csv"), a)
    write_matrix(tmp_path / "i.csv", np.array([[1, 2], [3, 40]]), integer=True)
    assert (tmp_path / "i.csv").read_text() == "1,2\n3,40\n"


def test_read_matrix_diagnostics(tmp_path):
    p = tmp_path / "y.csv"
    p.write_text("1,2,3\n4,5\n")
    with pytest.raises(InputError, match=r"y.csv:2"):
        read_matrix(p)
    p.write_text("1,2\n3,x\n")
    with pytest.raises(InputError, match=r"y.csv:2: cannot parse 'x'"):
        read_matrix(p)
    p.write_text("1,2.5\n")
    with pytest.raises(InputError, match="integer"):
        read_matrix(p, integer=True)
    with pytest.raises(FileNotFoundError):
        read_matrix(tmp_path / "missing.csv")


def test_mask_round_trip_and_bounds(tmp_path):
    m = np.zeros((3, 4), dtype=bool)
    m[0, 3] = m[2, 1] = True
    write_mask(tmp_path / "m.csv", m)
    assert (tmp_path / "m.csv").read_text() == "0,3\n2,1\n"
    assert np.array_equal(read_mask(tmp_path / "m.csv", (3, 4)), m)
    (tmp_path / "bad.csv").write_text("0,1\n5,0\n")
    with pytest.raises(InputError, match="bad.csv:2"):
        read_mask(tmp_path / "bad.csv", (3, 4))


def test_config_round_trip(tmp_path):
    hp = HyperParams(alpha=10.0, sigma_beta2=1 / 3, k_max=20, seed=4)
    write_config(tmp_path / "c.txt", hp)
    assert HyperParams(**read_config(tmp_path / "c.txt")) == hp
    (tmp_path / "bad.txt").write_text("# comment\nalpha=2\nbogus=1\n")
    with pytest.raises(InputError, match="bad.txt:3: unknown setting 'bogus'"):
        read_config(tmp_path / "bad.txt")
