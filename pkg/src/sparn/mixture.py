"""EM training of mixtures of sparse autoregressive networks.

Three parameter-sharing regimes are supported for the K component
conditionals of each dimension:

* ``untied`` -- fully separate weights per component,
* ``tied``   -- one shared dependency-weight vector plus per-component
  intercepts,
* ``auto``   -- global weights plus L1-penalized per-component deviations,
  so the data decide which weights untie.

All three are stored uniformly as an optional shared ``base`` plus K
component parameter sets whose sum is the effective conditional.  The same
engine also trains the gated blocks of the sequence-of-mixtures model: the
only difference is that component membership probabilities come from a
multiclass logistic gate on the preceding dimensions instead of a global
mixing vector.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .arn import (
    SIGMA_FLOOR,
    AutoregressiveNet,
    GaussianConditional,
    LogisticConditional,
    binary_logmass,
    gaussian_logdensity,
    residual_sigma,
)
from .data import Dataset, EncodingMeta
from .solvers import (
    ConvergenceWarning,
    SolverConfig,
    SparseWeights,
    _fit_linear_core,
    _fit_logistic_core,
    _fit_shared_core,
    _fit_values,
    fit_multiclass_gate,
    gate_log_probs,
)

RESP_FLOOR = 1e-12
MASS_FLOOR_FRACTION = 1e-8
MAX_RESEEDS = 5

SHARING_MODES = ("untied", "tied", "auto")

BASE_COMPONENT_GRID = (1, 2, 3, 5, 10, 20, 50, 100, 200, 500, 1000)


def component_grid(n_train: int, mode: str) -> list[int]:
    """Candidate component counts, capped by the training-set size.

    Roughly one component per thousand examples is sustainable without
    sharing and one per hundred with sharing; the caps below are generous
    versions of those magnitudes.
    """
    cap = max(1, n_train // 20) if mode == "untied" else max(1, n_train // 5)
    grid = [k for k in BASE_COMPONENT_GRID if k <= cap]
    return grid or [1]


def floor_responsibilities(resp: np.ndarray) -> np.ndarray:
    """Clamp entries at the floor and renormalize rows."""
    resp = np.maximum(resp, RESP_FLOOR)
    return resp / resp.sum(axis=1, keepdims=True)


def check_responsibilities(resp: np.ndarray, n: int) -> np.ndarray:
    resp = np.atleast_2d(np.asarray(resp, dtype=np.float64))
    if resp.shape[0] != n:
        raise ValueError("responsibilities must have one row per sample")
    if np.any(resp < 0) or np.any(np.abs(resp.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("responsibilities must be row-stochastic")
    return floor_responsibilities(resp)


@dataclass(frozen=True)
class DimParams:
    """Per-dimension mixture parameters: optional shared base + K component parts.

    The effective conditional of component k scores as base + comps[k]; for
    untied fits base is None, for tied fits comps are intercept-only.
    """

    base: SparseWeights | None
    comps: tuple[SparseWeights, ...]
    sigmas: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "comps", tuple(self.comps))
        if self.sigmas is not None:
            s = np.ascontiguousarray(self.sigmas, dtype=np.float64)
            s.flags.writeable = False
            object.__setattr__(self, "sigmas", s)

    def effective(self, k: int) -> SparseWeights:
        if self.base is None:
            return self.comps[k]
        return self.base.add(self.comps[k])


@dataclass(frozen=True)
class MixtureModel:
    kind: str
    mode: str
    mixing: np.ndarray
    dims: tuple[DimParams, ...]
    meta: EncodingMeta | None = None
    objective_trace: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        m = np.ascontiguousarray(self.mixing, dtype=np.float64)
        m.flags.writeable = False
        object.__setattr__(self, "mixing", m)
        object.__setattr__(self, "dims", tuple(self.dims))
        if self.mode not in SHARING_MODES:
            raise ValueError(f"unknown sharing mode {self.mode!r}")
        if abs(float(m.sum()) - 1.0) > 1e-12 or np.any(m <= 0):
            raise ValueError("mixing must be strictly positive and sum to 1")

    @property
    def k(self) -> int:
        return self.mixing.shape[0]

    @property
    def d(self) -> int:
        return len(self.dims)

    def component_network(self, k: int) -> AutoregressiveNet:
        """Assemble component k as a standalone autoregressive network."""
        conds = []
        for dp in self.dims:
            eff = dp.effective(k)
            if self.kind == "binary":
                conds.append(LogisticConditional(eff))
            else:
                conds.append(GaussianConditional(eff, float(dp.sigmas[k])))
        return AutoregressiveNet(self.kind, tuple(conds), self.meta)


def bank_logliks(X: np.ndarray, dims: tuple[DimParams, ...], lo: int, kind: str) -> np.ndarray:
    """(N, K) per-component log-likelihood of dimensions lo..lo+len(dims)-1."""
    n = X.shape[0]
    k = len(dims[0].comps)
    total = np.zeros((n, k))
    for t, dp in enumerate(dims):
        y = X[:, lo + t]
        base = dp.base.scores(X) if dp.base is not None else None
        for h in range(k):
            score = dp.comps[h].scores(X)
            if base is not None:
                score = score + base
            if kind == "binary":
                total[:, h] += binary_logmass(y, score)
            else:
                total[:, h] += gaussian_logdensity(y, score, float(dp.sigmas[h]))
    return total


def _bank_penalty(dims, cfg: SolverConfig) -> float:
    total = 0.0
    for dp in dims:
        if dp.base is not None:
            total += cfg.lam * float(np.abs(dp.base.values).sum())
            total += cfg.lam0 * abs(dp.base.intercept)
        for c in dp.comps:
            total += cfg.lam * float(np.abs(c.values).sum())
            total += cfg.lam0 * abs(c.intercept)
    return total


def _warm_shared_arrays(dp: DimParams | None, p: int, k: int):
    if dp is None:
        return None
    base = dp.base
    return (base.dense() if base is not None else np.zeros(p),
            base.intercept if base is not None else 0.0,
            np.stack([c.dense() for c in dp.comps]),
            np.array([c.intercept for c in dp.comps]))


def _mstep_dim(xt, y, d, kind, mode, cfg, resp, sigmas_prev, warm, unit_sq):
    """Exact penalized M-step for one dimension. Returns (DimParams, statuses)."""
    n, k = resp.shape
    family = "logistic" if kind == "binary" else "linear"
    # continuous: weight each component by 1/sigma^2 so the lasso subproblem is
    # the exact complete-data objective; sigma then re-estimated from residuals
    rw = resp if kind == "binary" else resp / np.maximum(sigmas_prev, SIGMA_FLOOR) ** 2
    statuses = []
    comp_icpt = k > 1
    if k == 1:
        w0 = rw[:, 0]
        if kind == "binary":
            coef, icpt, _, _, st = _fit_logistic_core(
                xt[:d], y, w0, cfg,
                warm[2][0] if warm else None, warm[3][0] if warm else 0.0,
                fit_icpt=True, unit_sq=unit_sq)
        else:
            coef, icpt, st = _fit_linear_core(
                xt[:d], y, w0, cfg, warm[2][0] if warm else None, fit_icpt=False)
        statuses.append(st)
        comps = (SparseWeights.from_dense(coef, icpt),)
        base = None
    elif mode == "untied":
        comps = []
        for h in range(k):
            wh = rw[:, h]
            if kind == "binary":
                coef, icpt, _, _, st = _fit_logistic_core(
                    xt[:d], y, wh, cfg,
                    warm[2][h] if warm else None, warm[3][h] if warm else 0.0,
                    fit_icpt=True, unit_sq=unit_sq)
            else:
                coef, icpt, st = _fit_linear_core(
                    xt[:d], y, wh, cfg,
                    warm[2][h] if warm else None, warm[3][h] if warm else 0.0,
                    fit_icpt=comp_icpt)
            statuses.append(st)
            comps.append(SparseWeights.from_dense(coef, icpt))
        comps = tuple(comps)
        base = None
    else:
        comp_weights = mode == "auto"
        global_icpt = comp_weights and kind == "binary"
        gcoef, gicpt, ccoef, cicpt, _, st = _fit_shared_core(
            xt[:d], y, rw, cfg, family, warm,
            global_icpt=global_icpt, comp_icpt=True, comp_weights=comp_weights,
            unit_sq=unit_sq)
        statuses.append(st)
        base = SparseWeights.from_dense(gcoef, gicpt)
        comps = tuple(SparseWeights.from_dense(ccoef[h], cicpt[h]) for h in range(k))
    sigmas = None
    if kind == "continuous":
        sigmas = np.empty(k)
        base_fit = _fit_values(xt[:d], base.dense(), base.intercept) if base is not None else 0.0
        for h in range(k):
            mean = base_fit + _fit_values(xt[:d], comps[h].dense(), comps[h].intercept)
            sigmas[h] = residual_sigma(y, mean, resp[:, h])
    return DimParams(base=base, comps=comps, sigmas=sigmas), statuses


def _reseed_collapsed(resp, sample_ll, counts, warn_sink):
    """Give emptied components the lowest-likelihood samples, a few times only."""
    n, k = resp.shape
    mass = resp.sum(axis=0)
    floor = MASS_FLOOR_FRACTION * n
    for h in np.flatnonzero(mass < floor):
        if counts[h] >= MAX_RESEEDS:
            warn_sink.append(f"component {h} stayed empty after {MAX_RESEEDS} reseeds")
            continue
        counts[h] += 1
        take = max(1, n // (4 * k))
        sel = np.argsort(sample_ll, kind="stable")[:take]
        resp[sel] *= 0.05
        resp[sel, h] += 0.95
    return floor_responsibilities(resp)


def _gated_em(values, kind, lo, hi, k, mode, cfg, init_resp, *, n_workers=1,
              max_iter=100, tol_improve=1e-5, gate_cfg=None):
    """EM for one gated bank of conditionals over dimensions [lo, hi).

    With lo == 0 the gate has no predictors and the membership prior is a
    plain mixing vector whose M-step is the exact responsibility column mean;
    otherwise the prior is a multiclass logistic gate on dimensions [0, lo),
    refitted every iteration.  Returns (mixing, gate, dims, trace, messages).
    """
    n = values.shape[0]
    resp = check_responsibilities(init_resp, n)
    if resp.shape[1] != k:
        raise ValueError(f"initial responsibilities have {resp.shape[1]} columns, expected {k}")
    xt = np.ascontiguousarray(values.T)
    unit_sq = kind == "binary"
    gate_cfg = gate_cfg or cfg
    gate = None
    mixing = None
    dims: list = [None] * (hi - lo)
    sigmas_prev = np.ones((hi - lo, k))
    trace: list[float] = []
    messages: list[str] = []
    counts = np.zeros(k, dtype=int)

    def run_mstep():
        def one(t):
            d = lo + t
            warm = _warm_shared_arrays(dims[t], d, k) if dims[t] is not None else None
            return _mstep_dim(xt, values[:, d], d, kind, mode, cfg, resp,
                              sigmas_prev[t], warm, unit_sq)
        if n_workers > 1:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                results = list(pool.map(one, range(hi - lo)))
        else:
            results = [one(t) for t in range(hi - lo)]
        for t, (dp, sts) in enumerate(results):
            dims[t] = dp
            if dp.sigmas is not None:
                sigmas_prev[t] = dp.sigmas
            for st in sts:
                if st.message:
                    messages.append(f"dimension {lo + t}: {st.message}")

    prev_obj = -np.inf
    for it in range(max_iter):
        if lo == 0:
            mixing = resp.mean(axis=0)
            log_prior = np.log(mixing)[None, :]
            gate_pen = 0.0
        else:
            gate = fit_multiclass_gate(values[:, :lo], resp, None, gate_cfg, warm=gate)
            log_prior = gate_log_probs(gate, values)
            gate_pen = sum(gate_cfg.lam * float(np.abs(g.values).sum())
                           + gate_cfg.lam0 * abs(g.intercept) for g in gate)
        run_mstep()
        comp_ll = bank_logliks(values, tuple(dims), lo, kind)
        logw = log_prior + comp_ll
        lse = logsumexp(logw, axis=1)
        obj = float(lse.mean()) - (_bank_penalty(dims, cfg) + gate_pen) / n
        trace.append(obj)
        if k == 1:
            break
        resp = floor_responsibilities(np.exp(logw - lse[:, None]))
        resp = _reseed_collapsed(resp, lse, counts, messages)
        if it > 0 and obj - prev_obj < tol_improve:
            break
        prev_obj = obj
    return mixing, gate, tuple(dims), tuple(trace), messages


def init_product_mixture(train: Dataset, k: int, rng, max_iter: int = 200) -> np.ndarray:
    """EM on a mixture of product (Bernoulli or diagonal-normal) distributions.

    Starts from seeded random responsibilities and returns the final (N, K)
    responsibility matrix, the recommended warm start for the full mixture.
    """
    return product_mixture_resp(train.values, train.kind, k, rng, max_iter)


def product_mixture_resp(values, kind, k, rng, max_iter: int = 200) -> np.ndarray:
    if k < 1:
        raise ValueError("need at least one component")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n, d = values.shape
    if k == 1:
        return np.ones((n, 1))
    resp = floor_responsibilities(rng.random((n, k)))
    pos = (values + 1.0) / 2.0 if kind == "binary" else None
    sq = values ** 2 if kind == "continuous" else None
    counts = np.zeros(k, dtype=int)
    messages: list[str] = []
    prev_total = -np.inf
    for it in range(max_iter):
        mass = resp.sum(axis=0)
        mixing = mass / n
        if kind == "binary":
            rates = np.clip((resp.T @ pos) / mass[:, None], 1e-9, 1.0 - 1e-9)
            ll = pos @ np.log(rates).T + (1.0 - pos) @ np.log1p(-rates).T
        else:
            means = (resp.T @ values) / mass[:, None]
            ex2 = (resp.T @ sq) / mass[:, None]
            var = np.maximum(ex2 - means ** 2, SIGMA_FLOOR ** 2)
            ll = (-0.5 * (sq @ (1.0 / var).T)
                  + values @ (means / var).T
                  - 0.5 * (means ** 2 / var).sum(axis=1)[None, :]
                  - 0.5 * (np.log(2.0 * np.pi * var)).sum(axis=1)[None, :])
        logw = np.log(mixing)[None, :] + ll
        lse = logsumexp(logw, axis=1)
        total = float(lse.sum())
        resp = floor_responsibilities(np.exp(logw - lse[:, None]))
        resp = _reseed_collapsed(resp, lse, counts, messages)
        if it > 0 and abs(total - prev_total) < 1e-6 * n:
            break
        prev_total = total
    for msg in messages:
        warnings.warn(f"product-mixture init: {msg}", ConvergenceWarning, stacklevel=2)
    return resp


def em_fit(train: Dataset, k: int, mode: str, cfg: SolverConfig,
           init: np.ndarray | None = None, *, n_workers: int = 1,
           max_iter: int = 100, tol_improve: float = 1e-5, seed=0) -> MixtureModel:
    """Alternate responsibilities (E) and weighted per-dimension fits (M).

    Stops when the mean penalized train log-likelihood improves by less than
    ``tol_improve`` nats per example, or after ``max_iter`` iterations.  The
    penalized objective trace is recorded on the returned model and is
    non-decreasing up to solver tolerance.
    """
    if mode not in SHARING_MODES:
        raise ValueError(f"unknown sharing mode {mode!r}")
    if k < 1:
        raise ValueError("need at least one component")
    if init is None:
        init = init_product_mixture(train, k, seed)
    mixing, _, dims, trace, messages = _gated_em(
        train.values, train.kind, 0, train.d, k, mode, cfg, init,
        n_workers=n_workers, max_iter=max_iter, tol_improve=tol_improve)
    for msg in messages:
        warnings.warn(msg, ConvergenceWarning, stacklevel=2)
    return MixtureModel(kind=train.kind, mode=mode, mixing=mixing, dims=dims,
                        meta=train.meta, objective_trace=trace)


def loglik_mixture(model: MixtureModel, x: np.ndarray):
    """log sum_k mixing_k * P_k(x); stable down to component logliks of -1e6."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.d:
        raise ValueError(f"model has {model.d} dimensions, data has {X.shape[1]}")
    comp = bank_logliks(X, model.dims, 0, model.kind)
    total = logsumexp(np.log(model.mixing)[None, :] + comp, axis=1)
    return float(total[0]) if single else total


def penalized_mixture_objective(model: MixtureModel, X: np.ndarray, cfg: SolverConfig) -> float:
    """Mean train loglik minus the per-example parameter penalty (EM's objective)."""
    return float(np.mean(loglik_mixture(model, X))) - _bank_penalty(model.dims, cfg) / X.shape[0]


def sample_mixture(model: MixtureModel, rng, n_samples: int = 1) -> np.ndarray:
    """Draw the latent component from the mixing weights, then sample its network."""
    from .arn import sample_arn

    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    cum = np.cumsum(model.mixing)
    nets: dict[int, AutoregressiveNet] = {}
    out = np.empty((n_samples, model.d))
    for i in range(n_samples):
        h = min(int(np.searchsorted(cum, rng.random(), side="right")), model.k - 1)
        if h not in nets:
            nets[h] = model.component_network(h)
        out[i] = sample_arn(nets[h], rng, 1)[0]
    return out


def responsibilities(model: MixtureModel, X: np.ndarray) -> np.ndarray:
    """Posterior component membership of each sample under the fitted model."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    logw = np.log(model.mixing)[None, :] + bank_logliks(X, model.dims, 0, model.kind)
    return floor_responsibilities(np.exp(logw - logsumexp(logw, axis=1, keepdims=True)))
