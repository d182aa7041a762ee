import numpy as np
import pytest

from sparn.arn import fit_arn, loglik_arn
from sparn.data import encode_binary, standardize
from sparn.mixture import em_fit, init_product_mixture, loglik_mixture
from sparn.seqmix import Partition, fit_sequence, grid_partition, loglik_sequence
from sparn.serialize import SerializationError, load_model, save_model
from sparn.solvers import SolverConfig


def binary_ds(n, d, seed):
    rng = np.random.default_rng(seed)
    return encode_binary((rng.random((n, d)) < 0.5).astype(float))


class TestRoundTrips:
    def test_arn_binary(self, tmp_path):
        ds = binary_ds(60, 5, 0)
        net = fit_arn(ds, SolverConfig(lam=1.0))
        path = tmp_path / "m.txt"
        save_model(net, path)
        loaded = load_model(path)
        np.testing.assert_array_equal(loglik_arn(net, ds.values),
                                      loglik_arn(loaded, ds.values))

    def test_arn_continuous_with_meta(self, tmp_path):
        rng = np.random.default_rng(1)
        raw = rng.normal(size=(50, 4)) * [1.0, 2.0, 0.5, 3.0] + 1.0
        raw[:, 2] = 7.0  # constant column survives the round trip
        ds = standardize(raw)
        net = fit_arn(ds, SolverConfig(lam=0.5))
        path = tmp_path / "m.txt"
        save_model(net, path)
        loaded = load_model(path)
        np.testing.assert_array_equal(loglik_arn(net, ds.values),
                                      loglik_arn(loaded, ds.values))
        np.testing.assert_array_equal(loaded.meta.means, ds.meta.means)
        np.testing.assert_array_equal(loaded.meta.stds, ds.meta.stds)
        assert loaded.meta.constant[2]

    @pytest.mark.parametrize("mode", ["untied", "tied", "auto"])
    def test_mixture_modes(self, tmp_path, mode):
        ds = binary_ds(120, 6, 2)
        model = em_fit(ds, 3, mode, SolverConfig(lam=2.0),
                       init_product_mixture(ds, 3, 0))
        path = tmp_path / "m.txt"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.mode == mode
        np.testing.assert_array_equal(loaded.mixing, model.mixing)
        np.testing.assert_array_equal(loglik_mixture(model, ds.values),
                                      loglik_mixture(loaded, ds.values))

    def test_sequence_with_perm(self, tmp_path):
        ds = binary_ds(100, 8, 3)
        perm, part = grid_partition(2, 4, 2, 2)
        model = fit_sequence(ds, part, [2, 2], "auto", SolverConfig(lam=2.0),
                             seed=0, perm=perm)
        path = tmp_path / "m.txt"
        save_model(model, path)
        loaded = load_model(path)
        np.testing.assert_array_equal(loaded.perm, model.perm)
        np.testing.assert_array_equal(loglik_sequence(model, ds.values),
                                      loglik_sequence(loaded, ds.values))

    def test_serialization_is_canonical(self, tmp_path):
        ds = binary_ds(60, 5, 4)
        model = em_fit(ds, 2, "auto", SolverConfig(lam=2.0),
                       init_product_mixture(ds, 2, 0))
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        save_model(model, p1)
        save_model(model, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestErrors:
    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("sparn-model 99\nfamily arn\n")
        with pytest.raises(SerializationError, match="version"):
            load_model(path)

    def test_not_a_model(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("hello world\n")
        with pytest.raises(SerializationError):
            load_model(path)

    def test_truncated(self, tmp_path):
        ds = binary_ds(30, 4, 5)
        net = fit_arn(ds, SolverConfig(lam=1.0))
        path = tmp_path / "m.txt"
        save_model(net, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-2]))
        with pytest.raises(SerializationError):
            load_model(path)
