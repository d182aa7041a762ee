"""Versioned text serialization for all three model families.

One line per parameter record.  Floats are written with Python's shortest
round-trip representation, so save/load is bit-exact and two identically
trained models serialize to identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .arn import AutoregressiveNet, GaussianConditional, LogisticConditional
from .data import EncodingMeta
from .mixture import DimParams, MixtureModel
from .seqmix import GatedBlock, Partition, SequenceModel
from .solvers import SparseWeights

FORMAT_NAME = "sparn-model"
FORMAT_VERSION = 1


class SerializationError(ValueError):
    """Model file is malformed or has an unsupported version."""


def _f(v: float) -> str:
    return repr(float(v))


def _weights_tokens(w: SparseWeights) -> str:
    parts = [f"icpt {_f(w.intercept)} nnz {w.nnz}"]
    parts += [f"{int(i)}:{_f(v)}" for i, v in zip(w.indices, w.values)]
    return " ".join(parts)


def _dim_lines(dp: DimParams, label: str) -> list[str]:
    lines = []
    if dp.base is None:
        lines.append(f"{label} base none")
    else:
        lines.append(f"{label} base {_weights_tokens(dp.base)}")
    for k, c in enumerate(dp.comps):
        sigma = "" if dp.sigmas is None else f" sigma {_f(dp.sigmas[k])}"
        lines.append(f"{label} comp {k} {_weights_tokens(c)}{sigma}")
    return lines


def _meta_lines(meta: EncodingMeta | None) -> list[str]:
    if meta is None:
        return ["encoding none"]
    return ["encoding standardized",
            "means " + " ".join(_f(v) for v in meta.means),
            "stds " + " ".join(_f(v) for v in meta.stds)]


def save_model(model, path) -> None:
    if isinstance(model, AutoregressiveNet):
        family, lines = "arn", _arn_lines(model)
    elif isinstance(model, MixtureModel):
        family, lines = "mixture", _mixture_lines(model)
    elif isinstance(model, SequenceModel):
        family, lines = "sequence", _sequence_lines(model)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    header = [f"{FORMAT_NAME} {FORMAT_VERSION}",
              f"family {family}",
              f"kind {model.kind}",
              f"dims {model.d}"]
    header += _meta_lines(model.meta)
    Path(path).write_text("\n".join(header + lines + ["end"]) + "\n")


def _arn_lines(model: AutoregressiveNet) -> list[str]:
    lines = []
    for d, cond in enumerate(model.conditionals):
        sigma = f" sigma {_f(cond.sigma)}" if model.kind == "continuous" else ""
        lines.append(f"conditional {d} {_weights_tokens(cond.weights)}{sigma}")
    return lines


def _mixture_lines(model: MixtureModel) -> list[str]:
    lines = [f"mode {model.mode}",
             f"components {model.k}",
             "mixing " + " ".join(_f(v) for v in model.mixing)]
    for d, dp in enumerate(model.dims):
        lines += _dim_lines(dp, f"dim {d}")
    return lines


def _sequence_lines(model: SequenceModel) -> list[str]:
    lines = ["partition " + " ".join(str(b) for b in model.partition.boundaries)]
    if model.perm is None:
        lines.append("perm none")
    else:
        lines.append("perm " + " ".join(str(int(v)) for v in model.perm))
    for ell, block in enumerate(model.blocks):
        lines.append(f"block {ell} components {block.k} mode {block.mode}")
        for k, g in enumerate(block.gate):
            lines.append(f"block {ell} gate {k} {_weights_tokens(g)}")
        for t, dp in enumerate(block.dims):
            lines += _dim_lines(dp, f"block {ell} dim {block.lo + t}")
    return lines


class _Cursor:
    def __init__(self, path):
        self.path = str(path)
        self.lines = Path(path).read_text().splitlines()
        self.pos = 0

    def peek(self):
        return self.lines[self.pos] if self.pos < len(self.lines) else None

    def next(self):
        line = self.peek()
        if line is None:
            raise SerializationError(f"{self.path}: unexpected end of file")
        self.pos += 1
        return line

    def fail(self, msg):
        raise SerializationError(f"{self.path}: line {self.pos}: {msg}")


def _parse_weights(tokens, n_predictors, cur) -> tuple[SparseWeights, list[str]]:
    try:
        if tokens[0] != "icpt" or tokens[2] != "nnz":
            raise IndexError
        icpt = float(tokens[1])
        nnz = int(tokens[3])
        pairs = tokens[4:4 + nnz]
        idx = np.empty(nnz, dtype=np.int64)
        val = np.empty(nnz)
        for i, pair in enumerate(pairs):
            a, b = pair.split(":")
            idx[i], val[i] = int(a), float(b)
        return (SparseWeights(intercept=icpt, indices=idx, values=val,
                              n_predictors=n_predictors), tokens[4 + nnz:])
    except (IndexError, ValueError) as exc:
        cur.fail(f"bad weight record: {exc}")


def _parse_meta(cur) -> EncodingMeta | None:
    line = cur.next()
    if line == "encoding none":
        return None
    if line != "encoding standardized":
        cur.fail(f"bad encoding line {line!r}")
    means = [float(t) for t in cur.next().split()[1:]]
    stds = [float(t) for t in cur.next().split()[1:]]
    return EncodingMeta(means=np.array(means), stds=np.array(stds))


def load_model(path):
    """Load a serialized model; the family is read from the header."""
    cur = _Cursor(path)
    head = cur.next().split()
    if len(head) != 2 or head[0] != FORMAT_NAME:
        cur.fail("not a model file")
    if int(head[1]) != FORMAT_VERSION:
        cur.fail(f"unsupported format version {head[1]}")
    family = cur.next().split()[1]
    kind = cur.next().split()[1]
    d_total = int(cur.next().split()[1])
    meta = _parse_meta(cur)
    if family == "arn":
        model = _load_arn(cur, kind, d_total, meta)
    elif family == "mixture":
        model = _load_mixture(cur, kind, d_total, meta)
    elif family == "sequence":
        model = _load_sequence(cur, kind, d_total, meta)
    else:
        cur.fail(f"unknown family {family!r}")
    if cur.next() != "end":
        cur.fail("missing end marker")
    return model


def _load_arn(cur, kind, d_total, meta) -> AutoregressiveNet:
    conds = []
    for d in range(d_total):
        tokens = cur.next().split()
        if tokens[:2] != ["conditional", str(d)]:
            cur.fail(f"expected conditional {d}")
        w, rest = _parse_weights(tokens[2:], d, cur)
        if kind == "continuous":
            if rest[:1] != ["sigma"]:
                cur.fail("missing sigma")
            conds.append(GaussianConditional(w, float(rest[1])))
        else:
            conds.append(LogisticConditional(w))
    return AutoregressiveNet(kind=kind, conditionals=tuple(conds), meta=meta)


def _load_dim(cur, label, n_predictors, k, kind):
    tokens = cur.next().split()
    want = label.split() + ["base"]
    if tokens[:len(want)] != want:
        cur.fail(f"expected '{label} base'")
    rest = tokens[len(want):]
    base = None
    if rest != ["none"]:
        base, _ = _parse_weights(rest, n_predictors, cur)
    comps = []
    sigmas = [] if kind == "continuous" else None
    for h in range(k):
        tokens = cur.next().split()
        want = label.split() + ["comp", str(h)]
        if tokens[:len(want)] != want:
            cur.fail(f"expected '{label} comp {h}'")
        w, rest = _parse_weights(tokens[len(want):], n_predictors, cur)
        comps.append(w)
        if kind == "continuous":
            if rest[:1] != ["sigma"]:
                cur.fail("missing sigma")
            sigmas.append(float(rest[1]))
    return DimParams(base=base, comps=tuple(comps),
                     sigmas=np.array(sigmas) if sigmas is not None else None)


def _load_mixture(cur, kind, d_total, meta) -> MixtureModel:
    mode = cur.next().split()[1]
    k = int(cur.next().split()[1])
    mixing = np.array([float(t) for t in cur.next().split()[1:]])
    if mixing.shape[0] != k:
        cur.fail("mixing length does not match component count")
    dims = [_load_dim(cur, f"dim {d}", d, k, kind) for d in range(d_total)]
    return MixtureModel(kind=kind, mode=mode, mixing=mixing, dims=tuple(dims), meta=meta)


def _load_sequence(cur, kind, d_total, meta) -> SequenceModel:
    boundaries = [int(t) for t in cur.next().split()[1:]]
    partition = Partition(tuple(boundaries))
    if partition.d != d_total:
        cur.fail("partition does not cover the dimensions")
    perm_tokens = cur.next().split()
    perm = None
    if perm_tokens[1:] != ["none"]:
        perm = np.array([int(t) for t in perm_tokens[1:]], dtype=np.int64)
    blocks = []
    for ell, (lo, hi) in enumerate(partition.intervals()):
        tokens = cur.next().split()
        if tokens[:2] != ["block", str(ell)] or tokens[2] != "components":
            cur.fail(f"expected block {ell} header")
        k = int(tokens[3])
        mode = tokens[5]
        gate = []
        for h in range(k):
            tokens = cur.next().split()
            if tokens[:4] != ["block", str(ell), "gate", str(h)]:
                cur.fail(f"expected block {ell} gate {h}")
            g, _ = _parse_weights(tokens[4:], lo, cur)
            gate.append(g)
        dims = [_load_dim(cur, f"block {ell} dim {d}", d, k, kind) for d in range(lo, hi)]
        blocks.append(GatedBlock(lo=lo, hi=hi, mode=mode, gate=tuple(gate),
                                 dims=tuple(dims)))
    return SequenceModel(kind=kind, partition=partition, blocks=tuple(blocks),
                         perm=perm, meta=meta)
