"""Bit-exact file formats: tensor datasets, model checkpoints, CSV logs.

All integers are unsigned 64-bit little-endian; all floating payloads are
64-bit IEEE-754 little-endian.  Malformed inputs raise typed errors and
never yield partial data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import linalg
from .model import DmdOperator, InferenceBundle, NormStats, SeriesTensor
from .nn import ACTIVATIONS, MlpParams

TENSOR_MAGIC = b"RRDY0001"
CHECKPOINT_MAGIC = b"RRCK0001"
CHECKPOINT_VERSION = 1


class PersistenceError(Exception):
    """Base class for file-format failures."""


class BadMagicError(PersistenceError):
    """The file does not start with the expected format tag."""


class TruncatedFileError(PersistenceError):
    """The file ended before the declared payload was complete."""


class PayloadMismatchError(PersistenceError):
    """Declared sizes and actual payload disagree (e.g. trailing bytes)."""


class VersionError(PersistenceError):
    """The checkpoint was written by an incompatible format version."""


class IntegrityError(PersistenceError):
    """A loaded section violates a structural invariant."""


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def floats(self, count: int) -> np.ndarray:
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.blob):
            raise PayloadMismatchError(
                f"{self.path}: {len(self.blob) - self.pos} trailing bytes "
                f"beyond the declared payload")


def _u64(x: int) -> bytes:
    return struct.pack("<Q", x)


def _f64s(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


# -- tensor files -----------------------------------------------------------

def write_tensor(path: str | Path, t: SeriesTensor) -> None:
    """Write (feature, time, sample)-ordered float64 payload, feature fastest."""
    parts = [TENSOR_MAGIC, _u64(t.F), _u64(t.T), _u64(t.N),
             _f64s(t.data.flatten(order="F"))]
    Path(path).write_bytes(b"".join(parts))


def read_tensor(path: str | Path) -> SeriesTensor:
    blob = Path(path).read_bytes()
    r = _Reader(blob, str(path))
    magic = r.take(8)
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"{path}: expected {TENSOR_MAGIC!r}, got {magic!r}")
    f, tt, n = r.u64(), r.u64(), r.u64()
    expected = 8 + 24 + 8 * f * tt * n
    if len(blob) < expected:
        raise TruncatedFileError(
            f"{path}: header declares {f}x{tt}x{n} but payload is short "
            f"({len(blob)} of {expected} bytes)")
    if len(blob) > expected:
        raise PayloadMismatchError(
            f"{path}: {len(blob) - expected} bytes beyond the declared payload")
    data = r.floats(f * tt * n).reshape((f, tt, n), order="F")
    return SeriesTensor(data)


# -- checkpoint files --------------------------------------------------------

_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}
_ACT_NAME = {i: name for name, i in _ACT_CODE.items()}


def _write_mlp(parts: list[bytes], net: MlpParams) -> None:
    parts.append(_u64(len(net.weights)))
    for w, b, act in zip(net.weights, net.biases, net.activations):
        parts.append(_u64(w.shape[0]))
        parts.append(_u64(w.shape[1]))
        parts.append(_u64(_ACT_CODE[act]))
        parts.append(_f64s(w))
        parts.append(_f64s(b))


def _read_mlp(r: _Reader) -> MlpParams:
    n_layers = r.u64()
    weights, biases, acts = [], [], []
    for _ in range(n_layers):
        rows, cols, code = r.u64(), r.u64(), r.u64()
        if code not in _ACT_NAME:
            raise IntegrityError(f"{r.path}: unknown activation code {code}")
        weights.append(r.floats(rows * cols).reshape(rows, cols))
        biases.append(r.floats(rows))
        acts.append(_ACT_NAME[code])
    try:
        return MlpParams(weights=weights, biases=biases, activations=acts)
    except ValueError as exc:
        raise IntegrityError(f"{r.path}: inconsistent network shapes: {exc}") from exc


def save_bundle(path: str | Path, bundle: InferenceBundle,
                config_echo: str = "") -> None:
    """Serialize an inference bundle; round trips preserve forecasts bitwise."""
    parts: list[bytes] = [CHECKPOINT_MAGIC, _u64(CHECKPOINT_VERSION)]
    parts.append(bundle.variant.encode("ascii").ljust(8, b"\0"))
    parts.append(_u64(bundle.k_star))
    parts.append(_u64(bundle.u_f.shape[0]))
    _write_mlp(parts, bundle.encoder)
    _write_mlp(parts, bundle.decoder)
    parts.append(_u64(1 if bundle.param_encoder is not None else 0))
    if bundle.param_encoder is not None:
        _write_mlp(parts, bundle.param_encoder)
    parts.append(_u64(bundle.u_f.shape[0]))
    parts.append(_u64(bundle.u_f.shape[1]))
    parts.append(_f64s(bundle.u_f))
    parts.append(_u64(bundle.w.w.shape[0]))
    parts.append(_f64s(bundle.w.w))
    parts.append(struct.pack("<d", bundle.w.fit_residual))
    parts.append(_u64(1 if bundle.w.degenerate else 0))
    parts.append(_u64(bundle.normalization.mean.shape[0]))
    parts.append(_f64s(bundle.normalization.mean))
    parts.append(_f64s(bundle.normalization.std))
    echo = config_echo.encode("utf-8")
    parts.append(_u64(len(echo)))
    parts.append(echo)
    Path(path).write_bytes(b"".join(parts))


def load_bundle(path: str | Path) -> tuple[InferenceBundle, str]:
    """Load a bundle and its config echo, validating every invariant."""
    blob = Path(path).read_bytes()
    r = _Reader(blob, str(path))
    magic = r.take(8)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
    version = r.u64()
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, "
                           f"supported {CHECKPOINT_VERSION}")
    variant = r.take(8).rstrip(b"\0").decode("ascii")
    k_star = r.u64()
    latent = r.u64()
    encoder = _read_mlp(r)
    decoder = _read_mlp(r)
    param_encoder = _read_mlp(r) if r.u64() else None
    uf_rows, uf_cols = r.u64(), r.u64()
    u_f = r.floats(uf_rows * uf_cols).reshape(uf_rows, uf_cols)
    wk = r.u64()
    w = r.floats(wk * wk).reshape(wk, wk)
    fit_residual = r.f64()
    degenerate = bool(r.u64())
    feat = r.u64()
    mean = r.floats(feat)
    std = r.floats(feat)
    echo = r.take(r.u64()).decode("utf-8")
    r.done()

    if uf_rows != latent or uf_cols != k_star or wk != k_star:
        raise IntegrityError(
            f"{path}: inconsistent shapes (U_f {uf_rows}x{uf_cols}, "
            f"W {wk}x{wk}, k*={k_star}, L={latent})")
    operator = DmdOperator(w=w, spectrum=linalg.eigenvalues(w),
                           fit_residual=fit_residual, degenerate=degenerate)
    try:
        bundle = InferenceBundle(
            encoder=encoder, decoder=decoder, u_f=u_f, w=operator,
            k_star=k_star, normalization=NormStats(mean=mean, std=std),
            variant=variant, param_encoder=param_encoder)
    except ValueError as exc:
        raise IntegrityError(f"{path}: {exc}") from exc
    return bundle, echo


# -- CSV ----------------------------------------------------------------------

def format_cell(value) -> str:
    """Render a cell; floats get 17 significant digits (lossless re-parse)."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def csv_text(fields: tuple[str, ...] | list[str], rows: list[list]) -> str:
    """Header plus one line per record, comma-separated UTF-8."""
    lines = [",".join(fields)]
    for row in rows:
        if len(row) != len(fields):
            raise ValueError(f"row width {len(row)} != header width {len(fields)}")
        lines.append(",".join(format_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(path: str | Path, fields, rows) -> None:
    Path(path).write_text(csv_text(fields, rows), encoding="utf-8")


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise PersistenceError(f"{path}: empty CSV")
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]
