"""Command-line surface: training with validation-based selection, evaluation,
sampling, and nearest-training-example diagnostics.

Configuration comes from a flat ``key=value`` file, overridable by flags.
All reports are written as machine-readable ``key value`` text.  Exit codes:
0 success, 1 usage error, 2 data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import serialize
from .arn import AutoregressiveNet, fit_arn, loglik_arn, sample_arn
from .data import (
    Dataset,
    EncodingError,
    ParseError,
    decode_binary,
    encode_binary,
    load_matrix,
    save_matrix,
    standardize,
)
from .images import (
    binary_to_gray,
    continuous_to_gray,
    symmetric_difference_rgb,
    write_pgm,
    write_ppm,
)
from .mixture import MixtureModel, em_fit, init_product_mixture, loglik_mixture
from .seqmix import Partition, SequenceModel, fit_sequence, grid_partition, loglik_sequence
from .solvers import SolverConfig, lambda_grid, lambda_max

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3


class UsageError(Exception):
    pass


class TrainingError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class ExperimentConfig:
    train: str = ""
    valid: str = ""
    test: str = ""
    kind: str = "binary"
    family: str = "arn"
    mode: str = "untied"
    lambda_grid: str = "auto"
    components_grid: str = "1"
    partition: str = ""
    seed: int = 0
    threads: int = 1
    out: str = "out"
    format: str = "dense-text"
    intercept_scale: float = 10.0
    tol: float = 1e-6
    max_sweeps: int = 1000
    max_outer_newton: int = 50
    max_em_iters: int = 100

    @classmethod
    def from_sources(cls, config_path: str | None, args) -> "ExperimentConfig":
        cfg = cls()
        if config_path:
            for key, value in _read_config(config_path).items():
                if not hasattr(cfg, key):
                    raise UsageError(f"unknown config key {key!r}")
                current = getattr(cfg, key)
                setattr(cfg, key, type(current)(value) if not isinstance(current, str) else value)
        for key in vars(cfg):
            override = getattr(args, key, None)
            if override is not None:
                setattr(cfg, key, override)
        return cfg

    def solver_config(self, lam: float) -> SolverConfig:
        return SolverConfig(lam=lam, intercept_scale=self.intercept_scale, tol=self.tol,
                            max_sweeps=self.max_sweeps, max_outer_newton=self.max_outer_newton)


def _read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class EvalReport:
    mean_loglik: float
    stderr: float
    per_example: np.ndarray
    selected_lambda: float | None = None
    selected_components: str | None = None
    wall_clock_sec: float = 0.0
    solver_warnings: list[str] = field(default_factory=list)

    @classmethod
    def from_logliks(cls, ll: np.ndarray, **kw) -> "EvalReport":
        ll = np.asarray(ll, dtype=np.float64)
        stderr = float(ll.std(ddof=1) / np.sqrt(ll.size)) if ll.size > 1 else 0.0
        return cls(mean_loglik=float(ll.mean()), stderr=stderr, per_example=ll, **kw)

    def lines(self) -> list[str]:
        out = [f"mean_loglik {self.mean_loglik!r}",
               f"stderr {self.stderr!r}",
               f"n_examples {self.per_example.size}"]
        if self.selected_lambda is not None:
            out.append(f"selected_lambda {self.selected_lambda!r}")
        if self.selected_components is not None:
            out.append(f"selected_components {self.selected_components}")
        out.append(f"wall_clock_sec {self.wall_clock_sec!r}")
        out.append(f"solver_warnings {len(self.solver_warnings)}")
        return out


def _load_split(path, kind, fmt, meta=None, role="train") -> Dataset:
    raw = load_matrix(path, fmt)
    if kind == "binary":
        return encode_binary(raw, role=role)
    return standardize(raw, meta=meta, role=role)


def _model_loglik(model, X: np.ndarray) -> np.ndarray:
    if isinstance(model, AutoregressiveNet):
        return loglik_arn(model, X)
    if isinstance(model, MixtureModel):
        return loglik_mixture(model, X)
    if isinstance(model, SequenceModel):
        return loglik_sequence(model, X)
    raise TypeError(f"cannot evaluate {type(model).__name__}")


def _parse_lambda_grid(spec: str, train: Dataset, cfg: ExperimentConfig) -> list[float]:
    spec = spec.strip()
    if spec != "auto":
        grid = [float(t) for t in spec.split(",") if t.strip()]
        if not grid:
            raise UsageError("empty lambda grid")
        return sorted(grid, reverse=True)
    family = "logistic" if train.kind == "binary" else "linear"
    lmax = 0.0
    for d in range(1, train.d):
        lmax = max(lmax, lambda_max(train.values[:, :d], train.values[:, d], None, family,
                                    intercept_scale=cfg.intercept_scale))
    return [float(v) for v in lambda_grid(lmax if lmax > 0 else 1.0)]


def _parse_components_grid(spec: str, family: str) -> list:
    points = [p.strip() for p in spec.split(";") if p.strip()]
    if not points:
        raise UsageError("empty components grid")
    if family == "sequence":
        return [[int(t) for t in p.split(",")] for p in points]
    out = []
    for p in points:
        out += [int(t) for t in p.split(",") if t.strip()]
    return sorted(set(out))


def _parse_partition(spec: str, d_total: int):
    """Either explicit boundaries '0,196,...,784' or 'grid:RxC:rxc'."""
    spec = spec.strip()
    if not spec:
        raise UsageError("family sequence requires --partition")
    if spec.startswith("grid:"):
        try:
            grid_part, block_part = spec[5:].split(":")
            rows, cols = (int(v) for v in grid_part.split("x"))
            brows, bcols = (int(v) for v in block_part.split("x"))
        except ValueError as exc:
            raise UsageError(f"bad partition spec {spec!r}: {exc}") from exc
        if rows * cols != d_total:
            raise UsageError(f"grid {rows}x{cols} does not match {d_total} dimensions")
        perm, partition = grid_partition(rows, cols, brows, bcols)
        return perm, partition
    boundaries = tuple(int(t) for t in spec.split(","))
    return None, Partition(boundaries)


def _train_one(family, train, lam, comps, mode, cfg: ExperimentConfig, perm, partition):
    solver = cfg.solver_config(lam)
    if family == "arn":
        return fit_arn(train, solver, n_workers=cfg.threads)
    if family == "mixture":
        init = init_product_mixture(train, comps, cfg.seed)
        return em_fit(train, comps, mode, solver, init, n_workers=cfg.threads,
                      max_iter=cfg.max_em_iters)
    if family == "sequence":
        return fit_sequence(train, partition, comps, mode, solver, seed=cfg.seed,
                            perm=perm, n_workers=cfg.threads, max_iter=cfg.max_em_iters)
    raise UsageError(f"unknown model family {family!r}")


def cmd_select_train(cfg: ExperimentConfig) -> int:
    """Grid search over (lambda, components): fit on train, select on validation
    mean loglik (ties prefer larger lambda, then fewer components), evaluate the
    selected model on test once.  The selected trained model is kept; nothing is
    refitted."""
    t_start = time.perf_counter()
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = _load_split(cfg.train, cfg.kind, cfg.format, role="train")
    valid = _load_split(cfg.valid, cfg.kind, cfg.format, meta=train.meta, role="valid")
    test = _load_split(cfg.test, cfg.kind, cfg.format, meta=train.meta, role="test")
    if not (train.d == valid.d == test.d):
        raise EncodingError("train/valid/test must share the dimension count")

    lams = _parse_lambda_grid(cfg.lambda_grid, train, cfg)
    comps_grid = _parse_components_grid(cfg.components_grid, cfg.family) \
        if cfg.family != "arn" else [1]
    perm = partition = None
    if cfg.family == "sequence":
        perm, partition = _parse_partition(cfg.partition, train.d)

    best = None
    failures = []
    grid_rows = []
    caught: list[str] = []
    for lam in lams:  # descending: first strict maximum wins the tie-break
        for comps in comps_grid:
            label = f"lambda={lam!r} components={comps}"
            try:
                with warnings.catch_warnings(record=True) as wlist:
                    warnings.simplefilter("always")
                    model = _train_one(cfg.family, train, lam, comps, cfg.mode, cfg,
                                       perm, partition)
                caught += [str(w.message) for w in wlist]
                score = float(np.mean(_model_loglik(model, valid.values)))
                grid_rows.append(f"{lam!r} {comps} {score!r}")
                if best is None or score > best[0]:
                    best = (score, lam, comps, model)
            except (ValueError, ArithmeticError) as exc:
                failures.append(f"{label}: {exc}")
                grid_rows.append(f"{lam!r} {comps} failed")
    (out_dir / "grid.txt").write_text("\n".join(grid_rows) + "\n")
    if best is None:
        raise TrainingError("all grid points failed: " + "; ".join(failures))

    score, lam, comps, model = best
    model_path = out_dir / "model.txt"
    serialize.save_model(model, model_path)
    test_ll = _model_loglik(model, test.values)
    report = EvalReport.from_logliks(
        test_ll, selected_lambda=lam,
        selected_components=",".join(str(c) for c in comps) if isinstance(comps, list)
        else str(comps),
        wall_clock_sec=time.perf_counter() - t_start, solver_warnings=caught)
    lines = ["status ok", f"family {cfg.family}", f"mode {cfg.mode}",
             f"kind {cfg.kind}", f"mean_valid_loglik {score!r}"]
    lines += report.lines()
    lines.append(f"model_path {model_path}")
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")
    _dump_logliks(out_dir / "test_loglik.txt", test_ll)
    for line in lines:
        print(line)
    return EXIT_OK


def _dump_logliks(path, ll: np.ndarray) -> None:
    Path(path).write_text("\n".join(repr(float(v)) for v in ll) + "\n")


def cmd_eval(args) -> int:
    model = serialize.load_model(args.model)
    data = _load_split(args.data, model.kind, args.format, meta=model.meta, role="test")
    if data.d != model.d:
        raise EncodingError(f"model has {model.d} dimensions, data has {data.d}")
    ll = _model_loglik(model, data.values)
    report = EvalReport.from_logliks(ll)
    for line in ["status ok"] + report.lines():
        print(line)
    if args.per_example:
        _dump_logliks(args.per_example, ll)
    if model.kind == "continuous" and model.meta is not None:
        jac = float(np.sum(np.log(model.meta.stds[model.meta.stds > 0])))
        print(f"raw_space_jacobian {(-jac)!r}")
    return EXIT_OK


def _parse_shape(spec: str) -> tuple[int, int]:
    try:
        r, c = spec.split("x")
        return int(r), int(c)
    except ValueError as exc:
        raise UsageError(f"bad image shape {spec!r}") from exc


def cmd_sample(args) -> int:
    model = serialize.load_model(args.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.count < 0:
        raise UsageError("count must be nonnegative")
    if isinstance(model, AutoregressiveNet):
        samples = sample_arn(model, args.seed, args.count)
    elif isinstance(model, MixtureModel):
        from .mixture import sample_mixture
        samples = sample_mixture(model, args.seed, args.count)
    else:
        from .seqmix import sample_sequence
        samples = sample_sequence(model, args.seed, args.count)
    if model.kind == "binary":
        rows = (samples + 1.0) / 2.0 if args.count else np.empty((0, model.d))
    else:
        rows = model.meta.inverse(samples) if model.meta is not None else samples
    save_matrix(out_dir / "samples.txt", rows if args.count else np.empty((0, model.d)))
    if args.image_shape and args.count:
        shape = _parse_shape(args.image_shape)
        if shape[0] * shape[1] != model.d:
            raise UsageError(f"image shape {args.image_shape} does not match {model.d} dims")
        for i in range(args.count):
            if model.kind == "binary":
                img = binary_to_gray(samples[i], shape)
            else:
                img = continuous_to_gray(rows[i], shape)
            write_pgm(out_dir / f"sample_{i:04d}.pgm", img)
    print(f"status ok\ncount {args.count}\nout {out_dir}")
    return EXIT_OK


def cmd_nearest(args) -> int:
    samples = load_matrix(args.samples, args.format)
    train = load_matrix(args.train, args.format)
    if samples.shape[1] != train.shape[1]:
        raise EncodingError("samples and training data must share the dimension count")
    if args.metric == "hamming":
        if args.kind != "binary":
            raise UsageError("hamming distance requires binary data")
        s = encode_binary(samples).values
        t = encode_binary(train).values
        # for +-1 vectors: hamming = (D - dot) / 2
        dots = s @ t.T
        dist = (s.shape[1] - dots) / 2.0
    elif args.metric == "euclidean":
        s, t = samples, train
        sq = ((s ** 2).sum(axis=1)[:, None] + (t ** 2).sum(axis=1)[None, :]
              - 2.0 * (s @ t.T))
        dist = np.sqrt(np.maximum(sq, 0.0))
    else:
        raise UsageError(f"unknown metric {args.metric!r}")
    idx = np.argmin(dist, axis=1)  # argmin takes the lowest index on ties
    lines = ["status ok", f"metric {args.metric}", f"n_samples {samples.shape[0]}"]
    lines += [f"nearest {i} {int(j)} {float(dist[i, j])!r}" for i, j in enumerate(idx)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    if args.diff_out:
        if args.kind != "binary":
            raise UsageError("symmetric-difference images require binary data")
        if not args.image_shape:
            raise UsageError("--diff-out requires --image-shape")
        shape = _parse_shape(args.image_shape)
        diff_dir = Path(args.diff_out)
        diff_dir.mkdir(parents=True, exist_ok=True)
        s = encode_binary(samples).values
        t = encode_binary(train).values
        for i, j in enumerate(idx):
            rgb = symmetric_difference_rgb(s[i], t[j], shape)
            write_ppm(diff_dir / f"diff_{i:04d}.ppm", rgb)
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="sparn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select-train", help="grid-search lambda/components and train")
    p.add_argument("--config", default=None)
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--kind", choices=["binary", "continuous"])
    p.add_argument("--family", choices=["arn", "mixture", "sequence"])
    p.add_argument("--mode", choices=["untied", "tied", "auto"])
    p.add_argument("--lambda-grid", dest="lambda_grid")
    p.add_argument("--components-grid", dest="components_grid")
    p.add_argument("--partition")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    p.add_argument("--format", choices=["dense-text", "dense-binary"])

    p = sub.add_parser("eval", help="mean test loglik of a serialized model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--per-example", dest="per_example", default=None)
    p.add_argument("--format", choices=["dense-text", "dense-binary"], default="dense-text")

    p = sub.add_parser("sample", help="draw samples; optionally render P5 images")
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-shape", dest="image_shape", default=None)

    p = sub.add_parser("nearest", help="exact nearest training example per sample")
    p.add_argument("--samples", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--metric", choices=["hamming", "euclidean"], default="hamming")
    p.add_argument("--kind", choices=["binary", "continuous"], default="binary")
    p.add_argument("--out", default=None)
    p.add_argument("--diff-out", dest="diff_out", default=None)
    p.add_argument("--image-shape", dest="image_shape", default=None)
    p.add_argument("--format", choices=["dense-text", "dense-binary"], default="dense-text")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "select-train":
            cfg = ExperimentConfig.from_sources(args.config, args)
            return cmd_select_train(cfg)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "sample":
            return cmd_sample(args)
        if args.command == "nearest":
            return cmd_nearest(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ParseError, EncodingError, serialize.SerializationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
