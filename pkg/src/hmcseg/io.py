"""Binary prediction dumps, SemanticKITTI ``.label`` files and learning maps.

Dump layout (all little-endian)::

    magic     5 bytes  b"HSEG1"
    version   u8       1
    flags     u16      bit 0 logits, 1 confidences, 2 features, 3 ambiguity, 4 predictions
    N         u64      point count
    C         u32      columns of the matrix block (logits or features), 0 if none
    matrix    N*C f32  row-major, present if bit 0 or bit 2 (never both)
    gt        N u32    ground-truth leaf ids, 0xFFFFFFFF = ignored
    conf      N f32    if bit 1
    ambiguous N u8     if bit 3
    pred      N u32    if bit 4, predicted node ids

In memory ignored labels are -1.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"HSEG1"
VERSION = 1
IGNORE = -1
_IGNORE_U32 = 0xFFFFFFFF
_HEADER = struct.Struct("<5sBHQI")
# refuse to allocate payloads above this many bytes
MAX_PAYLOAD_BYTES = 1 << 36

F_LOGITS, F_CONF, F_FEATURES, F_AMBIG, F_PRED = 1, 2, 4, 8, 16


class FormatError(ValueError):
    pass


@dataclass
class PredictionDump:
    gt: np.ndarray
    logits: np.ndarray | None = None
    confidence: np.ndarray | None = None
    features: np.ndarray | None = None
    ambiguous: np.ndarray | None = None
    pred: np.ndarray | None = None

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=np.int64).ravel()
        n = self.gt.size
        if self.logits is not None and self.features is not None:
            raise FormatError("a dump holds logits or features, not both")
        for name in ("logits", "features"):
            m = getattr(self, name)
            if m is not None:
                m = np.asarray(m, dtype="<f4")
                if m.ndim != 2 or m.shape[0] != n:
                    raise FormatError(f"{name} must have shape ({n}, C), got {m.shape}")
                setattr(self, name, m)
        for name, dt in (("confidence", "<f4"), ("ambiguous", "u1"), ("pred", np.int64)):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=dt).ravel()
                if v.size != n:
                    raise FormatError(f"{name} has {v.size} entries for {n} points")
                setattr(self, name, v)

    def __len__(self) -> int:
        return self.gt.size

    @property
    def matrix(self) -> np.ndarray | None:
        return self.logits if self.logits is not None else self.features


def _u32(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    if np.any(a >= _IGNORE_U32) or np.any(a < IGNORE):
        raise FormatError("ids must lie in [0, 2**32 - 1) or be -1 (ignored)")
    return np.where(a < 0, _IGNORE_U32, a).astype("<u4")


def dump_bytes(d: PredictionDump) -> bytes:
    flags = 0
    m = d.matrix
    if d.logits is not None:
        flags |= F_LOGITS
    if d.features is not None:
        flags |= F_FEATURES
    if d.confidence is not None:
        flags |= F_CONF
    if d.ambiguous is not None:
        flags |= F_AMBIG
    if d.pred is not None:
        flags |= F_PRED
    cols = 0 if m is None else m.shape[1]
    parts = [_HEADER.pack(MAGIC, VERSION, flags, len(d), cols)]
    if m is not None:
        parts.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
    parts.append(_u32(d.gt).tobytes())
    if d.confidence is not None:
        parts.append(d.confidence.astype("<f4").tobytes())
    if d.ambiguous is not None:
        parts.append(d.ambiguous.astype("u1").tobytes())
    if d.pred is not None:
        parts.append(_u32(d.pred).tobytes())
    return b"".join(parts)


def write_dump(path: str | os.PathLike, d: PredictionDump) -> None:
    Path(path).write_bytes(dump_bytes(d))


def _payload_size(flags: int, n: int, cols: int) -> int:
    size = 4 * n  # gt
    if flags & (F_LOGITS | F_FEATURES):
        size += 4 * n * cols
    if flags & F_CONF:
        size += 4 * n
    if flags & F_AMBIG:
        size += n
    if flags & F_PRED:
        size += 4 * n
    return size


def parse_dump(buf: bytes) -> PredictionDump:
    if len(buf) < _HEADER.size:
        raise FormatError("file too short for a dump header")
    magic, version, flags, n, cols = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported dump version {version}")
    if flags & ~(F_LOGITS | F_CONF | F_FEATURES | F_AMBIG | F_PRED):
        raise FormatError(f"unknown flag bits in {flags:#x}")
    if flags & F_LOGITS and flags & F_FEATURES:
        raise FormatError("dump declares both logits and features")
    if bool(flags & (F_LOGITS | F_FEATURES)) != (cols > 0):
        raise FormatError("column count inconsistent with flags")
    # python ints do not overflow; check before touching the payload
    size = _payload_size(flags, n, cols)
    if size > MAX_PAYLOAD_BYTES:
        raise FormatError(f"declared payload of {size} bytes exceeds the {MAX_PAYLOAD_BYTES} byte limit")
    if len(buf) - _HEADER.size != size:
        raise FormatError(f"payload is {len(buf) - _HEADER.size} bytes, header declares {size}")

    off = _HEADER.size

    def take(dtype, count, shape=None):
        nonlocal off
        a = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += a.nbytes
        return a.reshape(shape) if shape else a

    matrix = take("<f4", n * cols, (n, cols)) if cols else None
    gt = take("<u4", n).astype(np.int64)
    gt[gt == _IGNORE_U32] = IGNORE
    conf = take("<f4", n) if flags & F_CONF else None
    amb = take("u1", n) if flags & F_AMBIG else None
    pred = take("<u4", n).astype(np.int64) if flags & F_PRED else None
    return PredictionDump(
        gt=gt,
        logits=matrix if flags & F_LOGITS else None,
        features=matrix if flags & F_FEATURES else None,
        confidence=conf,
        ambiguous=amb,
        pred=pred,
    )


def read_dump(path: str | os.PathLike) -> PredictionDump:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) == _HEADER.size and head[:5] == MAGIC:
            _, _, flags, n, cols = _HEADER.unpack(head)
            expected = _payload_size(flags, n, cols)
            if expected > MAX_PAYLOAD_BYTES:
                raise FormatError(f"{path}: declared payload of {expected} bytes exceeds the limit")
        data = head + f.read()
    try:
        return parse_dump(data)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


def parse_learning_map(text: str, h=None) -> dict[int, str]:
    """Parse ``raw_id name`` lines (``raw_id -> name`` also accepted)."""
    out: dict[int, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace("->", " ").replace(":", " ").split()
        if len(parts) != 2:
            raise FormatError(f"learning map line {lineno}: expected 'raw_id name', got {raw!r}")
        try:
            key = int(parts[0])
        except ValueError:
            raise FormatError(f"learning map line {lineno}: {parts[0]!r} is not an integer") from None
        if key < 0:
            raise FormatError(f"learning map line {lineno}: raw id {key} is negative")
        if h is not None:
            try:
                if not h.is_leaf(h.id(parts[1])):
                    raise FormatError(f"learning map line {lineno}: {parts[1]!r} is not a leaf class")
            except KeyError:
                raise FormatError(f"learning map line {lineno}: unknown class {parts[1]!r}") from None
        out[key] = parts[1]
    return out


def semantic_ids(buf: bytes) -> np.ndarray:
    """Low 16 bits of each little-endian u32 word (the high half is the instance id)."""
    if len(buf) % 4:
        raise FormatError(f"label file of {len(buf)} bytes is truncated (not a multiple of 4)")
    return (np.frombuffer(buf, dtype="<u4") & 0xFFFF).astype(np.int64)


def read_label_file(path, learning_map: dict[int, str], h, strict: bool = False) -> np.ndarray:
    """Dense leaf ids for a ``.label`` file; unmapped semantic ids become -1."""
    sem = semantic_ids(Path(path).read_bytes())
    lut_size = max([0, *learning_map.keys(), int(sem.max()) if sem.size else 0]) + 1
    lut = np.full(lut_size, IGNORE, dtype=np.int64)
    for raw, name in learning_map.items():
        lut[raw] = h.id(name)
    out = lut[sem]
    if strict and np.any(out == IGNORE):
        missing = sorted(set(sem[out == IGNORE].tolist()))
        raise FormatError(f"{path}: semantic ids {missing[:10]} have no learning-map entry")
    return out


def write_csv(path, header: list[str], columns) -> None:
    cols = [np.asarray(c) for c in columns]
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows([_fmt(v) for v in row] for row in zip(*cols))


def _fmt(v) -> str:
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return repr(float(v))
