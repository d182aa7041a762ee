import itertools

import numpy as np
import pytest

from sparn.arn import fit_arn, loglik_arn
from sparn.data import encode_binary
from sparn.mixture import em_fit, init_product_mixture, loglik_mixture
from sparn.seqmix import (
    GatedBlock,
    Partition,
    SequenceModel,
    fit_sequence,
    grid_partition,
    infer_posterior,
    loglik_sequence,
    sample_sequence,
)
from sparn.solvers import SolverConfig, SparseWeights, gate_log_probs


def all_binary(d):
    return np.array(list(itertools.product([-1.0, 1.0], repeat=d)))


def clustered_data(n, d, seed):
    rng = np.random.default_rng(seed)
    label = rng.random(n) < 0.5
    p = np.where(label[:, None], 0.8, 0.2)
    raw = (rng.random((n, d)) < p).astype(float)
    return encode_binary(raw)


class TestPartition:
    def test_validation(self):
        with pytest.raises(ValueError):
            Partition((1, 4))
        with pytest.raises(ValueError):
            Partition((0, 4, 4))
        part = Partition((0, 3, 8))
        assert part.l == 2 and part.d == 8
        assert part.intervals() == [(0, 3), (3, 8)]

    def test_grid_partition_quadrants(self):
        perm, part = grid_partition(28, 28, 14, 14)
        assert part.boundaries == (0, 196, 392, 588, 784)
        assert sorted(perm.tolist()) == list(range(784))
        # first block is the top-left quadrant in raster order
        assert perm[0] == 0 and perm[1] == 1
        assert perm[14] == 28  # second row of the quadrant
        # second block starts at the top-right quadrant
        assert perm[196] == 14

    def test_grid_partition_must_divide(self):
        with pytest.raises(ValueError):
            grid_partition(28, 28, 13, 14)


class TestFitSequence:
    def test_single_block_equals_mixture(self):
        ds = clustered_data(200, 6, 0)
        cfg = SolverConfig(lam=2.0)
        seq = fit_sequence(ds, Partition((0, 6)), [2], "untied", cfg, seed=0)
        mix = em_fit(ds, 2, "untied", cfg, init_product_mixture(ds, 2, 0))
        test = clustered_data(60, 6, 1)
        np.testing.assert_allclose(loglik_sequence(seq, test.values),
                                   loglik_mixture(mix, test.values), atol=1e-9)

    def test_one_block_per_dimension_equals_arn(self):
        ds = clustered_data(120, 5, 2)
        cfg = SolverConfig(lam=1.5)
        seq = fit_sequence(ds, Partition(tuple(range(6))), [1] * 5, "untied", cfg, seed=0)
        net = fit_arn(ds, cfg)
        test = clustered_data(50, 5, 3)
        np.testing.assert_allclose(loglik_sequence(seq, test.values),
                                   loglik_arn(net, test.values), atol=1e-9)

    def test_per_block_modes_and_ks(self):
        ds = clustered_data(150, 6, 4)
        cfg = SolverConfig(lam=2.0)
        seq = fit_sequence(ds, Partition((0, 2, 6)), [2, 3], ["tied", "auto"], cfg, seed=1)
        assert seq.blocks[0].k == 2 and seq.blocks[1].k == 3
        assert seq.blocks[0].mode == "tied" and seq.blocks[1].mode == "auto"
        ll = loglik_sequence(seq, ds.values)
        assert np.all(np.isfinite(ll))

    def test_block_order_invariance_through_seeding(self):
        # block training must not depend on fitting order: parallel == serial
        ds = clustered_data(150, 6, 5)
        cfg = SolverConfig(lam=2.0)
        a = fit_sequence(ds, Partition((0, 3, 6)), [2, 2], "untied", cfg, seed=3,
                         n_workers=1)
        b = fit_sequence(ds, Partition((0, 3, 6)), [2, 2], "untied", cfg, seed=3,
                         n_workers=4)
        np.testing.assert_array_equal(loglik_sequence(a, ds.values),
                                      loglik_sequence(b, ds.values))

    def test_permutation_roundtrip(self):
        ds = clustered_data(150, 8, 6)
        cfg = SolverConfig(lam=2.0)
        perm, part = grid_partition(2, 4, 2, 2)  # 8 dims as a 2x4 grid in 2x2 tiles
        seq = fit_sequence(ds, part, [2, 2], "untied", cfg, seed=0, perm=perm)
        ll = loglik_sequence(seq, ds.values)
        # identical data fitted on explicitly permuted columns, no model perm
        ds_p = encode_binary((ds.values[:, perm] + 1) / 2)
        seq_p = fit_sequence(ds_p, part, [2, 2], "untied", cfg, seed=0)
        np.testing.assert_allclose(ll, loglik_sequence(seq_p, ds.values[:, perm]),
                                   atol=1e-12)
        s = sample_sequence(seq, 5, 4)
        assert s.shape == (4, 8)


class TestExactness:
    def make_model(self, d=8, seed=7):
        ds = clustered_data(250, d, seed)
        cfg = SolverConfig(lam=2.5)
        return fit_sequence(ds, Partition((0, 4, d)), [2, 3], "untied", cfg, seed=0)

    def test_marginal_equals_latent_enumeration(self):
        model = self.make_model()
        X = all_binary(8)[::7]
        want = np.zeros(X.shape[0])
        # brute force: sum over all (h1, h2) of P(h, x)
        log_gates = [gate_log_probs(b.gate, X) for b in model.blocks]
        from sparn.mixture import bank_logliks
        comps = [bank_logliks(X, b.dims, b.lo, model.kind) for b in model.blocks]
        total = np.zeros(X.shape[0])
        probs = np.zeros(X.shape[0])
        for h1 in range(2):
            for h2 in range(3):
                joint = (log_gates[0][:, h1] + comps[0][:, h1]
                         + log_gates[1][:, h2] + comps[1][:, h2])
                probs += np.exp(joint)
        got = loglik_sequence(model, X)
        np.testing.assert_allclose(got, np.log(probs), atol=1e-10)

    def test_normalization_by_enumeration(self):
        model = self.make_model()
        total = np.exp(loglik_sequence(model, all_binary(8))).sum()
        assert abs(total - 1.0) <= 1e-9

    def test_posterior_factorizes(self):
        model = self.make_model()
        x = all_binary(8)[101]
        post = infer_posterior(model, x)
        # brute-force joint posterior over (h1, h2)
        joint = np.zeros((2, 3))
        from sparn.mixture import bank_logliks
        X = x[None]
        lg = [gate_log_probs(b.gate, X)[0] for b in model.blocks]
        cl = [bank_logliks(X, b.dims, b.lo, model.kind)[0] for b in model.blocks]
        for h1 in range(2):
            for h2 in range(3):
                joint[h1, h2] = np.exp(lg[0][h1] + cl[0][h1] + lg[1][h2] + cl[1][h2])
        joint /= joint.sum()
        np.testing.assert_allclose(joint.sum(axis=1), post[0], atol=1e-10)
        np.testing.assert_allclose(joint.sum(axis=0), post[1], atol=1e-10)
        np.testing.assert_allclose(np.outer(post[0], post[1]), joint, atol=1e-10)

    def test_point_mass_posterior_for_k1(self):
        ds = clustered_data(80, 4, 8)
        seq = fit_sequence(ds, Partition((0, 2, 4)), [1, 1], "untied",
                           SolverConfig(lam=1.0), seed=0)
        post = infer_posterior(seq, ds.values[0])
        for p in post:
            np.testing.assert_allclose(p, [1.0])

    def test_flat_likelihood_posterior_equals_gate(self):
        # identical components: posterior must reproduce the gate probabilities
        w = SparseWeights.from_dense(np.array([0.4]), 0.1)
        from sparn.mixture import DimParams
        dims = (DimParams(base=None, comps=(w, w)),)
        gate = (SparseWeights.from_dense(np.array([0.8]), -0.2), SparseWeights.empty(1))
        block0 = GatedBlock(lo=0, hi=1, mode="untied",
                            gate=(SparseWeights.empty(0, intercept=np.log(0.5)),
                                  SparseWeights.empty(0, intercept=np.log(0.5))),
                            dims=(DimParams(base=None, comps=(
                                SparseWeights.empty(0, intercept=0.3),
                                SparseWeights.empty(0, intercept=0.3))),))
        block1 = GatedBlock(lo=1, hi=2, mode="untied", gate=gate, dims=dims)
        model = SequenceModel("binary", Partition((0, 1, 2)), (block0, block1))
        x = np.array([1.0, -1.0])
        post = infer_posterior(model, x)
        expected = np.exp(gate_log_probs(gate, x[None]))[0]
        np.testing.assert_allclose(post[1], expected, atol=1e-12)


class TestSampleSequence:
    def test_deterministic(self):
        ds = clustered_data(150, 6, 9)
        seq = fit_sequence(ds, Partition((0, 3, 6)), [2, 2], "untied",
                           SolverConfig(lam=2.0), seed=0)
        np.testing.assert_array_equal(sample_sequence(seq, 11, 8),
                                      sample_sequence(seq, 11, 8))

    def test_intercept_gate_latent_frequencies(self):
        from sparn.mixture import DimParams
        gate = (SparseWeights.empty(0, intercept=np.log(0.7)),
                SparseWeights.empty(0, intercept=np.log(0.3)))
        # component 0 emits +1 almost surely, component 1 emits -1 almost surely
        dims = (DimParams(base=None, comps=(
            SparseWeights.empty(0, intercept=8.0),
            SparseWeights.empty(0, intercept=-8.0))),)
        block = GatedBlock(lo=0, hi=1, mode="untied", gate=gate, dims=dims)
        model = SequenceModel("binary", Partition((0, 1)), (block,))
        draws = sample_sequence(model, 3, 10_000)
        freq = (draws > 0).mean()
        assert abs(freq - 0.7) < 3 * np.sqrt(0.7 * 0.3 / 10_000) + 1e-3
