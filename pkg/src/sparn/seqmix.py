"""Sequence-of-mixtures model: gated mixtures over a partition of dimensions.

The D dimensions are split into L disjoint intervals.  Each interval carries
its own mixture of sparse autoregressive conditionals whose component
membership is chosen by a multiclass logistic gate reading all previous
dimensions, and whose conditionals may also use all previous dimensions as
predictors.  Because the latent variables are interleaved with the
observables, the marginal likelihood is an exact product of per-block sums
and the posterior factorizes over blocks.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import Dataset, EncodingMeta
from .mixture import (
    DimParams,
    _gated_em,
    bank_logliks,
    product_mixture_resp,
)
from .solvers import ConvergenceWarning, SolverConfig, SparseWeights, gate_log_probs


@dataclass(frozen=True)
class Partition:
    """Interval boundaries 0 = b_0 < b_1 < ... < b_L = D."""

    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = tuple(int(v) for v in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if len(b) < 2 or b[0] != 0:
            raise ValueError("boundaries must start at 0 and contain at least one interval")
        if any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ValueError("boundaries must be strictly increasing")

    @property
    def l(self) -> int:
        return len(self.boundaries) - 1

    @property
    def d(self) -> int:
        return self.boundaries[-1]

    def intervals(self) -> list[tuple[int, int]]:
        b = self.boundaries
        return [(b[i], b[i + 1]) for i in range(len(b) - 1)]


def grid_partition(rows: int, cols: int, block_rows: int, block_cols: int):
    """Quadrant-style split of a rows x cols raster grid into block tiles.

    Returns (perm, Partition): ``perm`` reorders raster-order pixel indices
    into the canonical block-major order (raster order within each block,
    blocks in raster order), and the partition boundaries delimit the blocks.
    """
    if rows % block_rows or cols % block_cols:
        raise ValueError("block size must divide the grid size")
    perm = []
    boundaries = [0]
    for br in range(0, rows, block_rows):
        for bc in range(0, cols, block_cols):
            for r in range(br, br + block_rows):
                for c in range(bc, bc + block_cols):
                    perm.append(r * cols + c)
            boundaries.append(len(perm))
    return np.array(perm, dtype=np.int64), Partition(tuple(boundaries))


@dataclass(frozen=True)
class GatedBlock:
    """One interval's gate plus its bank of per-dimension conditionals.

    The gate's K weight vectors read dimensions [0, lo); the conditional for
    global dimension d inside the block reads dimensions [0, d).
    """

    lo: int
    hi: int
    mode: str
    gate: tuple[SparseWeights, ...]
    dims: tuple[DimParams, ...]
    objective_trace: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "gate", tuple(self.gate))
        object.__setattr__(self, "dims", tuple(self.dims))
        if len(self.dims) != self.hi - self.lo:
            raise ValueError("one DimParams entry per block dimension required")
        for g in self.gate:
            if g.n_predictors != self.lo:
                raise ValueError("gate must read exactly the preceding dimensions")

    @property
    def k(self) -> int:
        return len(self.gate)


@dataclass(frozen=True)
class SequenceModel:
    kind: str
    partition: Partition
    blocks: tuple[GatedBlock, ...]
    perm: np.ndarray | None = None
    meta: EncodingMeta | None = None

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.perm is not None:
            p = np.ascontiguousarray(self.perm, dtype=np.int64)
            p.flags.writeable = False
            object.__setattr__(self, "perm", p)
            if sorted(p.tolist()) != list(range(self.partition.d)):
                raise ValueError("perm must be a permutation of the dimensions")
        for block, (lo, hi) in zip(self.blocks, self.partition.intervals()):
            if (block.lo, block.hi) != (lo, hi):
                raise ValueError("blocks must align with the partition intervals")

    @property
    def d(self) -> int:
        return self.partition.d

    def ordered(self, x: np.ndarray) -> np.ndarray:
        """Map raw-order columns into the model's internal (permuted) order."""
        return x if self.perm is None else x[..., self.perm]

    def unordered(self, x: np.ndarray) -> np.ndarray:
        if self.perm is None:
            return x
        out = np.empty_like(x)
        out[..., self.perm] = x
        return out


def _mixing_gate(mixing: np.ndarray) -> tuple[SparseWeights, ...]:
    # an intercept-only gate whose softmax reproduces the mixing weights
    return tuple(SparseWeights.empty(0, intercept=float(np.log(m))) for m in mixing)


def fit_sequence(train: Dataset, partition: Partition, ks, mode, cfg: SolverConfig,
                 seed=0, *, perm: np.ndarray | None = None, n_workers: int = 1,
                 max_iter: int = 100, tol_improve: float = 1e-5) -> SequenceModel:
    """Train each block's gated mixture independently.

    ``ks`` is one component count per block (or a single int for all);
    ``mode`` likewise.  The first block's gate has no predictors and reduces
    to mixing weights.  Block seeds derive from ``seed`` + block index, so
    fitting order (or block-level parallelism) cannot change the result.
    """
    if partition.d != train.d:
        raise ValueError(f"partition covers {partition.d} dimensions, data has {train.d}")
    values = train.values if perm is None else np.ascontiguousarray(train.values[:, perm])
    intervals = partition.intervals()
    l = len(intervals)
    ks = [int(ks)] * l if np.isscalar(ks) else [int(v) for v in ks]
    modes = [mode] * l if isinstance(mode, str) else list(mode)
    if len(ks) != l or len(modes) != l:
        raise ValueError("need one component count and mode per block")

    inner_workers = n_workers if l == 1 else 1

    def fit_block(ell):
        lo, hi = intervals[ell]
        init = product_mixture_resp(values[:, lo:hi], train.kind, ks[ell], seed + ell)
        mixing, gate, dims, trace, messages = _gated_em(
            values, train.kind, lo, hi, ks[ell], modes[ell], cfg, init,
            n_workers=inner_workers, max_iter=max_iter, tol_improve=tol_improve)
        if gate is None:
            gate = _mixing_gate(mixing) if ks[ell] > 1 else (SparseWeights.empty(lo),)
        return GatedBlock(lo=lo, hi=hi, mode=modes[ell], gate=gate, dims=dims,
                          objective_trace=trace), messages

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(fit_block, range(l)))
    else:
        results = [fit_block(ell) for ell in range(l)]
    blocks = []
    for ell, (block, messages) in enumerate(results):
        blocks.append(block)
        for msg in messages:
            warnings.warn(f"block {ell}: {msg}", ConvergenceWarning, stacklevel=2)
    return SequenceModel(kind=train.kind, partition=partition, blocks=tuple(blocks),
                         perm=perm, meta=train.meta)


def _block_logliks(model: SequenceModel, X: np.ndarray):
    """Yields (log gate probs, per-component conditional logliks) per block."""
    for block in model.blocks:
        log_gate = gate_log_probs(block.gate, X)
        comp = bank_logliks(X, block.dims, block.lo, model.kind)
        yield log_gate, comp


def loglik_sequence(model: SequenceModel, x: np.ndarray):
    """Exact marginal loglik: sum over blocks of log sum_h gate_h * P(block | h)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.d:
        raise ValueError(f"model has {model.d} dimensions, data has {X.shape[1]}")
    X = model.ordered(X)
    total = np.zeros(X.shape[0])
    for log_gate, comp in _block_logliks(model, X):
        total += logsumexp(log_gate + comp, axis=1)
    return float(total[0]) if single else total


def infer_posterior(model: SequenceModel, x: np.ndarray) -> list[np.ndarray]:
    """Per-block posterior over the latent component; the joint is their product."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = model.ordered(np.atleast_2d(x))
    out = []
    for log_gate, comp in _block_logliks(model, X):
        logw = log_gate + comp
        post = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
        out.append(post[0] if single else post)
    return out


def sample_sequence(model: SequenceModel, rng, n_samples: int = 1) -> np.ndarray:
    """Blocks in order: draw h from the gate on the generated prefix, then the dims."""
    from scipy.special import expit

    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    out = np.empty((n_samples, model.d))
    for i in range(n_samples):
        x = out[i]
        for block in model.blocks:
            scores = np.array([g.score_one(x[:block.lo]) for g in block.gate])
            probs = np.exp(scores - logsumexp(scores))
            h = min(int(np.searchsorted(np.cumsum(probs), rng.random(), side="right")),
                    block.k - 1)
            for t in range(block.hi - block.lo):
                d = block.lo + t
                dp = block.dims[t]
                eff = dp.effective(h)
                score = eff.score_one(x[:d])
                if model.kind == "binary":
                    x[d] = 1.0 if rng.random() < expit(score) else -1.0
                else:
                    x[d] = score + float(dp.sigmas[h]) * rng.standard_normal()
    return model.unordered(out)
