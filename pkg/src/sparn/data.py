"""Dataset ingestion, encoding and split management.

Binary data are encoded as +-1 so that the L1 penalty acts symmetrically on
both states.  Continuous data are standardized column-wise to zero mean and
unit variance using statistics computed on the training split only; the same
statistics are then applied verbatim to validation and test splits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SPRN"
HEADER_SIZE = 16  # magic(4) + n(4) + d(4) + reserved(4), little-endian

ROLES = ("train", "valid", "test")


class ParseError(ValueError):
    """An input file could not be parsed into a rectangular matrix."""


class EncodingError(ValueError):
    """Raw values cannot be encoded for the requested data kind."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class EncodingMeta:
    """Per-column standardization statistics from the training split.

    A stored standard deviation of exactly 0.0 marks a constant column;
    such columns are centered but not rescaled.
    """

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "means", _readonly(np.atleast_1d(self.means)))
        object.__setattr__(self, "stds", _readonly(np.atleast_1d(self.stds)))
        if self.means.shape != self.stds.shape or self.means.ndim != 1:
            raise ValueError("means and stds must be equal-length vectors")
        if np.any(self.stds < 0):
            raise ValueError("standard deviations must be nonnegative")

    @property
    def constant(self) -> np.ndarray:
        return self.stds == 0.0

    def transform(self, raw: np.ndarray) -> np.ndarray:
        divisor = np.where(self.stds == 0.0, 1.0, self.stds)
        return (raw - self.means) / divisor

    def inverse(self, encoded: np.ndarray) -> np.ndarray:
        divisor = np.where(self.stds == 0.0, 1.0, self.stds)
        return encoded * divisor + self.means


@dataclass(frozen=True)
class Dataset:
    """An encoded sample matrix. Immutable and safe to share across threads."""

    values: np.ndarray
    kind: str
    meta: EncodingMeta | None = None
    role: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(np.atleast_2d(self.values)))
        if self.kind not in ("binary", "continuous"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.role not in ROLES:
            raise ValueError(f"unknown split role {self.role!r}")
        n, d = self.values.shape
        if n < 1 or d < 1:
            raise ValueError("dataset must have at least one row and one column")
        if self.kind == "binary":
            if not np.all(np.abs(self.values) == 1.0):
                raise ValueError("binary dataset entries must be exactly -1 or +1")
        elif self.meta is not None and self.meta.means.shape[0] != d:
            raise ValueError("encoding metadata does not match column count")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def load_matrix(path, fmt: str = "dense-text") -> np.ndarray:
    """Read an N x D matrix of reals in row-major sample order.

    ``dense-text`` is whitespace-separated values, one sample per line.
    ``dense-binary`` is a 16-byte header (magic ``SPRN``, u32 n, u32 d,
    4 reserved bytes) followed by little-endian float64 values.
    """
    path = Path(path)
    if fmt == "dense-text":
        return _load_text(path)
    if fmt == "dense-binary":
        return _load_binary(path)
    raise ValueError(f"unknown matrix format {fmt!r}")


def _load_text(path: Path) -> np.ndarray:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise ParseError(
                f"{path}: parse error at line {lineno}: expected {width} values, got {len(tokens)}"
            )
        try:
            rows.append([float(t) for t in tokens])
        except ValueError as exc:
            raise ParseError(f"{path}: parse error at line {lineno}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}: parse error: no rows")
    return np.asarray(rows, dtype=np.float64)


def _load_binary(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise ParseError(f"{path}: parse error: truncated header")
    magic, n, d, _ = struct.unpack("<4sIII", raw[:HEADER_SIZE])
    if magic != MAGIC:
        raise ParseError(f"{path}: parse error: bad magic {magic!r}")
    if n < 1 or d < 1:
        raise ParseError(f"{path}: parse error: no rows")
    expected = HEADER_SIZE + 8 * n * d
    if len(raw) != expected:
        raise ParseError(f"{path}: parse error: expected {expected} bytes, got {len(raw)}")
    body = np.frombuffer(raw, dtype="<f8", offset=HEADER_SIZE)
    return body.reshape(n, d).astype(np.float64)


def save_matrix(path, values: np.ndarray, fmt: str = "dense-text") -> None:
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    path = Path(path)
    if fmt == "dense-text":
        with path.open("w") as fh:
            for row in values:
                fh.write(" ".join(repr(float(v)) for v in row))
                fh.write("\n")
    elif fmt == "dense-binary":
        n, d = values.shape
        with path.open("wb") as fh:
            fh.write(struct.pack("<4sIII", MAGIC, n, d, 0))
            fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
    else:
        raise ValueError(f"unknown matrix format {fmt!r}")


def encode_binary(raw: np.ndarray, role: str = "train") -> Dataset:
    """Map a {0,1} matrix onto {-1,+1}."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    bad = (raw != 0.0) & (raw != 1.0)
    if np.any(bad):
        r, c = np.argwhere(bad)[0]
        raise EncodingError(
            f"encoding error: entry at row {r}, column {c} is {raw[r, c]!r}, not in {{0, 1}}"
        )
    return Dataset(values=2.0 * raw - 1.0, kind="binary", role=role)


def decode_binary(ds: Dataset) -> np.ndarray:
    if ds.kind != "binary":
        raise EncodingError("decode_binary requires a binary dataset")
    return (ds.values + 1.0) / 2.0


def standardize(raw: np.ndarray, meta: EncodingMeta | None = None, role: str = "train") -> Dataset:
    """Center and scale columns to zero mean, unit variance (population std).

    Without ``meta`` this is the training split and statistics are computed
    here; with ``meta`` the stored training statistics are applied.  Constant
    training columns map to all-zero and are flagged in the metadata.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    if meta is None:
        means = raw.mean(axis=0)
        stds = raw.std(axis=0)  # population convention, fixed globally
        meta = EncodingMeta(means=means, stds=stds)
    elif meta.means.shape[0] != raw.shape[1]:
        raise EncodingError(
            f"encoding metadata has {meta.means.shape[0]} columns, data has {raw.shape[1]}"
        )
    return Dataset(values=meta.transform(raw), kind="continuous", meta=meta, role=role)
