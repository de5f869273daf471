"""File formats: binary PGM images, the model container, key=value config files."""

from __future__ import annotations

import io
import re
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import NetConfig
from .pipeline import ModelArtifact

MODEL_MAGIC = b"MSCAPS"
MODEL_VERSION = 1


class FormatError(ValueError):
    """A file is malformed or truncated."""


class ModelVersionError(FormatError):
    """Model file has the wrong magic or an unsupported version."""


# ----------------------------------------------------------------------------
# PGM (P5)

_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _pgm_header(buf: bytes) -> tuple[list[int], int]:
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM (missing P5 magic)")
    pos, values = 2, []
    for _ in range(3):
        m = _PGM_TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("truncated PGM header")
        try:
            values.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"bad PGM header field {m.group(1)!r}") from None
        pos = m.end()
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("PGM header must end with a single whitespace byte")
    return values, pos + 1


def read_pgm(path: str | Path) -> np.ndarray:
    """8- or 16-bit (big-endian) greyscale image as an integer array."""
    buf = Path(path).read_bytes()
    (width, height, maxval), offset = _pgm_header(buf)
    if not 0 < maxval < 65536 or width <= 0 or height <= 0:
        raise FormatError(f"unsupported PGM geometry {width}x{height} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(buf) - offset < need:
        raise FormatError(f"PGM payload truncated: need {need} bytes, have {len(buf) - offset}")
    data = np.frombuffer(buf, dtype=dtype, count=width * height, offset=offset)
    return data.reshape(height, width).astype(np.int64)


def write_pgm(path: str | Path, image: np.ndarray, maxval: int | None = None) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {img.shape}")
    if (img < 0).any():
        raise ValueError("PGM samples must be nonnegative")
    vals = np.rint(img).astype(np.int64)
    maxval = int(max(vals.max(), 1)) if maxval is None else maxval
    maxval = 255 if maxval <= 255 else 65535
    if vals.max() > maxval:
        raise ValueError(f"sample {vals.max()} exceeds maxval {maxval}")
    dtype = np.dtype("u1") if maxval == 255 else np.dtype(">u2")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + vals.astype(dtype).tobytes())


def read_mask(path: str | Path) -> np.ndarray:
    """Binary mask from a PGM: any nonzero sample counts as changed."""
    return (read_pgm(path) > 0).astype(np.uint8)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    write_pgm(path, np.asarray(mask, dtype=np.int64) * 255, 255)


# ----------------------------------------------------------------------------
# model container


def _hyper_block(model: ModelArtifact) -> str:
    fields = {f"net.{k}": v for k, v in model.net.to_dict().items()}
    fields.update({"di_lo": repr(model.di_lo), "di_hi": repr(model.di_hi), "seed": model.seed})
    fields.update({f"extra.{k}": v for k, v in model.extra.items()})
    return "".join(f"{k}={v}\n" for k, v in fields.items())


def dumps_model(model: ModelArtifact) -> bytes:
    out = io.BytesIO()
    out.write(MODEL_MAGIC + bytes([MODEL_VERSION]))
    out.write(struct.pack("<I", len(model.params)))
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    hyper = _hyper_block(model).encode("utf-8")
    out.write(struct.pack("<I", len(hyper)) + hyper)
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"model file truncated while reading {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads_model(buf: bytes) -> ModelArtifact:
    r = _Reader(buf)
    head = r.take(len(MODEL_MAGIC) + 1, "magic")
    if head[:-1] != MODEL_MAGIC:
        raise ModelVersionError(f"bad magic {head[:-1]!r}; not a model file or incompatible version")
    if head[-1] != MODEL_VERSION:
        raise ModelVersionError(f"model version {head[-1]} unsupported (expected {MODEL_VERSION})")
    (count,) = r.unpack("<I", "tensor count")
    params: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"tensor {i} name length")
        try:
            name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor {i} name is not UTF-8") from None
        (rank,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        payload = r.take(8 * int(np.prod(dims, dtype=np.int64)), f"{name} payload")
        params[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    (hyper_len,) = r.unpack("<I", "hyperparameter length")
    hyper = parse_keyvalue(r.take(hyper_len, "hyperparameters").decode("utf-8"))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after model data")
    try:
        net = NetConfig.from_dict({k[4:]: v for k, v in hyper.items() if k.startswith("net.")})
        extra = {k[6:]: v for k, v in hyper.items() if k.startswith("extra.")}
        return ModelArtifact(net, params, float(hyper["di_lo"]), float(hyper["di_hi"]), int(hyper["seed"]), extra)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad hyperparameter block: {exc}") from exc


def save_model(path: str | Path, model: ModelArtifact) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path: str | Path) -> ModelArtifact:
    return loads_model(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# key=value files


def parse_keyvalue(text: str) -> dict[str, str]:
    """``key=value`` per line; blank lines and ``#`` comments ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config(path: str | Path) -> dict[str, str]:
    return parse_keyvalue(Path(path).read_text())


def format_keyvalue(fields: Mapping[str, object]) -> str:
    return "".join(f"{k}={v}\n" for k, v in fields.items())
