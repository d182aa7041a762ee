import math

import numpy as np
import pytest

from sparn.arn import AutoregressiveNet, LogisticConditional
from sparn.cli import main
from sparn.data import load_matrix, save_matrix
from sparn.serialize import load_model, save_model
from sparn.solvers import SparseWeights


def write_binary_dataset(tmp_path, n, d, seed, name):
    rng = np.random.default_rng(seed)
    label = rng.random(n) < 0.5
    p = np.where(label[:, None], 0.75, 0.25)
    raw = (rng.random((n, d)) < p).astype(float)
    path = tmp_path / name
    save_matrix(path, raw)
    return path


@pytest.fixture
def splits(tmp_path):
    return (write_binary_dataset(tmp_path, 150, 5, 0, "train.txt"),
            write_binary_dataset(tmp_path, 60, 5, 1, "valid.txt"),
            write_binary_dataset(tmp_path, 60, 5, 2, "test.txt"))


def read_report(path):
    out = {}
    for line in path.read_text().splitlines():
        key, _, value = line.partition(" ")
        out[key] = value
    return out


class TestSelectTrain:
    def test_single_point_grid_trains(self, tmp_path, splits):
        train, valid, test = splits
        out = tmp_path / "run"
        rc = main(["select-train", "--train", str(train), "--valid", str(valid),
                   "--test", str(test), "--kind", "binary", "--family", "arn",
                   "--lambda-grid", "2.0", "--out", str(out)])
        assert rc == 0
        report = read_report(out / "report.txt")
        assert report["status"] == "ok"
        assert float(report["selected_lambda"]) == 2.0
        assert (out / "model.txt").exists()

    def test_argmax_prefers_larger_lambda_on_ties(self, tmp_path, splits):
        train, valid, test = splits
        out = tmp_path / "run"
        # a grid with a duplicated value ties exactly; the larger (first) wins
        rc = main(["select-train", "--train", str(train), "--valid", str(valid),
                   "--test", str(test), "--kind", "binary", "--family", "arn",
                   "--lambda-grid", "3.0,3.0", "--out", str(out)])
        assert rc == 0

    def test_selects_validation_argmax(self, tmp_path, splits):
        train, valid, test = splits
        out = tmp_path / "run"
        rc = main(["select-train", "--train", str(train), "--valid", str(valid),
                   "--test", str(test), "--kind", "binary", "--family", "arn",
                   "--lambda-grid", "200.0,4.0", "--out", str(out)])
        assert rc == 0
        report = read_report(out / "report.txt")
        # at lam=200 everything is the null model; lam=4 must beat it here
        grid = (out / "grid.txt").read_text().splitlines()
        scores = {float(line.split()[0]): float(line.split()[2]) for line in grid}
        want = max(scores, key=lambda lam: (scores[lam], lam))
        assert float(report["selected_lambda"]) == want

    def test_report_arithmetic_recomputable(self, tmp_path, splits):
        train, valid, test = splits
        out = tmp_path / "run"
        main(["select-train", "--train", str(train), "--valid", str(valid),
              "--test", str(test), "--kind", "binary", "--family", "arn",
              "--lambda-grid", "2.0", "--out", str(out)])
        report = read_report(out / "report.txt")
        ll = np.array([float(v) for v in (out / "test_loglik.txt").read_text().split()])
        assert abs(ll.mean() - float(report["mean_loglik"])) < 1e-12
        stderr = ll.std(ddof=1) / math.sqrt(ll.size)
        assert abs(stderr - float(report["stderr"])) < 1e-12

    def test_mixture_family_with_config_file(self, tmp_path, splits):
        train, valid, test = splits
        out = tmp_path / "run"
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(
            f"train={train}\nvalid={valid}\ntest={test}\n"
            "kind=binary\nfamily=mixture\nmode=tied\n"
            "lambda_grid=3.0\ncomponents_grid=1,2\n"
            f"out={out}\nseed=1\n")
        rc = main(["select-train", "--config", str(cfg)])
        assert rc == 0
        report = read_report(out / "report.txt")
        assert report["selected_components"] in {"1", "2"}

    def test_sequence_family_grid_partition(self, tmp_path, splits):
        train, valid, test = splits
        # 5 dims cannot form a grid; build an 8-dim dataset instead
        train = write_binary_dataset(tmp_path, 120, 8, 3, "t8.txt")
        valid = write_binary_dataset(tmp_path, 50, 8, 4, "v8.txt")
        test = write_binary_dataset(tmp_path, 50, 8, 5, "s8.txt")
        out = tmp_path / "run"
        rc = main(["select-train", "--train", str(train), "--valid", str(valid),
                   "--test", str(test), "--kind", "binary", "--family", "sequence",
                   "--mode", "untied", "--lambda-grid", "2.0",
                   "--components-grid", "2,2", "--partition", "grid:2x4:2x2",
                   "--out", str(out)])
        assert rc == 0
        model = load_model(out / "model.txt")
        assert model.partition.boundaries == (0, 4, 8)

    def test_determinism_across_worker_counts(self, tmp_path, splits):
        train, valid, test = splits
        outs = []
        for threads in ("1", "3"):
            out = tmp_path / f"run{threads}"
            rc = main(["select-train", "--train", str(train), "--valid", str(valid),
                       "--test", str(test), "--kind", "binary", "--family", "mixture",
                       "--mode", "auto", "--lambda-grid", "3.0,1.0",
                       "--components-grid", "2", "--seed", "7",
                       "--threads", threads, "--out", str(out)])
            assert rc == 0
            outs.append((out / "model.txt").read_bytes())
        assert outs[0] == outs[1]

    def test_all_failures_exit_3(self, tmp_path, splits):
        train, valid, test = splits
        out = tmp_path / "run"
        # binary mixtures reject lam=0 (unpenalized intercepts diverge)
        rc = main(["select-train", "--train", str(train), "--valid", str(valid),
                   "--test", str(test), "--kind", "binary", "--family", "mixture",
                   "--lambda-grid", "0.0", "--components-grid", "2",
                   "--out", str(out)])
        assert rc == 3

    def test_missing_file_exit_2(self, tmp_path, splits):
        _, valid, test = splits
        rc = main(["select-train", "--train", str(tmp_path / "nope.txt"),
                   "--valid", str(valid), "--test", str(test), "--kind", "binary",
                   "--family", "arn", "--lambda-grid", "1.0",
                   "--out", str(tmp_path / "run")])
        assert rc == 2

    def test_usage_error_exit_1(self):
        assert main(["select-train", "--no-such-flag"]) == 1
        assert main(["frobnicate"]) == 1


class TestEval:
    def test_uniform_model_exact_value(self, tmp_path):
        d = 784
        conds = tuple(LogisticConditional(SparseWeights.empty(i)) for i in range(d))
        net = AutoregressiveNet("binary", conds)
        model_path = tmp_path / "uniform.txt"
        save_model(net, model_path)
        rng = np.random.default_rng(0)
        data = tmp_path / "data.txt"
        save_matrix(data, (rng.random((20, d)) < 0.5).astype(float))
        per = tmp_path / "per.txt"
        rc = main(["eval", "--model", str(model_path), "--data", str(data),
                   "--per-example", str(per)])
        assert rc == 0
        ll = np.array([float(v) for v in per.read_text().split()])
        # closed form -784*log(2); the per-dimension sum accumulates ~1e-12 of
        # float rounding, which is the resolution limit of any per-term sum
        np.testing.assert_allclose(ll, -d * math.log(2), rtol=0, atol=1e-9)

    def test_loaded_model_reproduces_logliks_bit_exactly(self, tmp_path, capsys):
        train = write_binary_dataset(tmp_path, 80, 6, 6, "t.txt")
        valid = write_binary_dataset(tmp_path, 30, 6, 7, "v.txt")
        test = write_binary_dataset(tmp_path, 30, 6, 8, "s.txt")
        out = tmp_path / "run"
        main(["select-train", "--train", str(train), "--valid", str(valid),
              "--test", str(test), "--kind", "binary", "--family", "arn",
              "--lambda-grid", "2.0", "--out", str(out)])
        from sparn.arn import loglik_arn
        from sparn.data import encode_binary
        model = load_model(out / "model.txt")
        raw = load_matrix(test)
        in_memory = loglik_arn(model, encode_binary(raw).values)
        dumped = np.array([float(v)
                           for v in (out / "test_loglik.txt").read_text().split()])
        np.testing.assert_array_equal(in_memory, dumped)

    def test_dimension_mismatch_exit_2(self, tmp_path):
        net = AutoregressiveNet(
            "binary", tuple(LogisticConditional(SparseWeights.empty(i)) for i in range(3)))
        model_path = tmp_path / "m.txt"
        save_model(net, model_path)
        data = tmp_path / "d.txt"
        save_matrix(data, np.zeros((2, 5)))
        rc = main(["eval", "--model", str(model_path), "--data", str(data)])
        assert rc == 2


class TestSample:
    def make_model(self, tmp_path, d=16):
        rng = np.random.default_rng(9)
        conds = []
        for i in range(d):
            dense = np.where(rng.random(i) < 0.7, 0.0, rng.normal(size=i))
            conds.append(LogisticConditional(SparseWeights.from_dense(dense, 0.1)))
        path = tmp_path / "model.txt"
        save_model(AutoregressiveNet("binary", tuple(conds)), path)
        return path

    def test_count_zero_success(self, tmp_path):
        model = self.make_model(tmp_path)
        out = tmp_path / "samples"
        rc = main(["sample", "--model", str(model), "--count", "0",
                   "--seed", "1", "--out", str(out)])
        assert rc == 0
        assert (out / "samples.txt").read_text() == ""

    def test_writes_pgm_per_sample(self, tmp_path):
        model = self.make_model(tmp_path)
        out = tmp_path / "samples"
        rc = main(["sample", "--model", str(model), "--count", "3", "--seed", "1",
                   "--out", str(out), "--image-shape", "4x4"])
        assert rc == 0
        for i in range(3):
            data = (out / f"sample_{i:04d}.pgm").read_bytes()
            assert data.startswith(b"P5\n4 4\n255\n") and len(data) == 11 + 16
        rows = load_matrix(out / "samples.txt")
        assert rows.shape == (3, 16)
        assert set(np.unique(rows)) <= {0.0, 1.0}

    def test_byte_identical_across_runs(self, tmp_path):
        model = self.make_model(tmp_path)
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            main(["sample", "--model", str(model), "--count", "4", "--seed", "5",
                  "--out", str(out), "--image-shape", "4x4"])
            blobs.append((out / "samples.txt").read_bytes()
                         + (out / "sample_0000.pgm").read_bytes())
        assert blobs[0] == blobs[1]


class TestNearest:
    def test_exact_match_distance_zero(self, tmp_path):
        train = np.array([[0, 1, 1], [1, 0, 0], [1, 1, 1.0]])
        t_path = tmp_path / "train.txt"
        save_matrix(t_path, train)
        s_path = tmp_path / "samples.txt"
        save_matrix(s_path, train[[1]])
        out = tmp_path / "nn.txt"
        rc = main(["nearest", "--samples", str(s_path), "--train", str(t_path),
                   "--metric", "hamming", "--out", str(out)])
        assert rc == 0
        line = [l for l in out.read_text().splitlines() if l.startswith("nearest")][0]
        _, idx, j, dist = line.split()
        assert (int(idx), int(j), float(dist)) == (0, 1, 0.0)

    def test_hamming_count(self, tmp_path):
        t_path = tmp_path / "train.txt"
        save_matrix(t_path, np.array([[1.0, 1, 1]]))
        s_path = tmp_path / "s.txt"
        save_matrix(s_path, np.array([[0.0, 1, 1]]))
        out = tmp_path / "nn.txt"
        main(["nearest", "--samples", str(s_path), "--train", str(t_path),
              "--metric", "hamming", "--out", str(out)])
        line = [l for l in out.read_text().splitlines() if l.startswith("nearest")][0]
        assert float(line.split()[3]) == 1.0

    def test_ties_take_lowest_index(self, tmp_path):
        t_path = tmp_path / "train.txt"
        save_matrix(t_path, np.array([[1.0, 1], [1.0, 1]]))
        s_path = tmp_path / "s.txt"
        save_matrix(s_path, np.array([[1.0, 1]]))
        out = tmp_path / "nn.txt"
        main(["nearest", "--samples", str(s_path), "--train", str(t_path),
              "--metric", "hamming", "--out", str(out)])
        line = [l for l in out.read_text().splitlines() if l.startswith("nearest")][0]
        assert int(line.split()[2]) == 0

    def test_symmetric_difference_images(self, tmp_path):
        t_path = tmp_path / "train.txt"
        save_matrix(t_path, np.array([[1.0, 1, 0, 0]]))
        s_path = tmp_path / "s.txt"
        save_matrix(s_path, np.array([[1.0, 0, 1, 0]]))
        diff = tmp_path / "diff"
        rc = main(["nearest", "--samples", str(s_path), "--train", str(t_path),
                   "--metric", "hamming", "--image-shape", "2x2",
                   "--diff-out", str(diff)])
        assert rc == 0
        data = (diff / "diff_0000.ppm").read_bytes()
        body = data[len(b"P6\n2 2\n255\n"):]
        pixels = [tuple(body[i: i + 3]) for i in range(0, 12, 3)]
        assert pixels[0] == (255, 255, 255)   # both on
        assert pixels[1] == (0, 0, 255)       # only in train
        assert pixels[2] == (255, 128, 0)     # only in sample
        assert pixels[3] == (255, 255, 255)   # both off

    def test_identical_vectors_all_white(self, tmp_path):
        t_path = tmp_path / "train.txt"
        save_matrix(t_path, np.array([[1.0, 0, 1, 0]]))
        diff = tmp_path / "diff"
        main(["nearest", "--samples", str(t_path), "--train", str(t_path),
              "--metric", "hamming", "--image-shape", "2x2", "--diff-out", str(diff)])
        data = (diff / "diff_0000.ppm").read_bytes()
        assert data.endswith(bytes([255, 255, 255] * 4))

    def test_metric_kind_mismatch_exit_1(self, tmp_path):
        t_path = tmp_path / "train.txt"
        save_matrix(t_path, np.array([[0.5, 1.2]]))
        rc = main(["nearest", "--samples", str(t_path), "--train", str(t_path),
                   "--metric", "hamming", "--kind", "continuous"])
        assert rc == 1

    def test_euclidean(self, tmp_path):
        t_path = tmp_path / "train.txt"
        save_matrix(t_path, np.array([[0.0, 0.0], [3.0, 4.0]]))
        s_path = tmp_path / "s.txt"
        save_matrix(s_path, np.array([[3.1, 4.1]]))
        out = tmp_path / "nn.txt"
        main(["nearest", "--samples", str(s_path), "--train", str(t_path),
              "--metric", "euclidean", "--kind", "continuous", "--out", str(out)])
        line = [l for l in out.read_text().splitlines() if l.startswith("nearest")][0]
        assert int(line.split()[2]) == 1
