"""PTAG binary time-tag files and the CSV truth sidecar.

Layout (little-endian): ``b"PTAG"``, version u16, resolution_ps u32,
clock_rate_mHz u64, tag_count u64, then ``tag_count`` u64 timestamps in ps.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .photon_sim import Symbol, TagStream, Truth

MAGIC = b"PTAG"
VERSION = 1
HEADER = struct.Struct("<4sHIQQ")
_COUNT_OFFSET = HEADER.size - 8


class TagFileError(ValueError):
    pass


@dataclass(frozen=True)
class PtagHeader:
    version: int
    resolution_ps: int
    clock_rate_millihz: int
    tag_count: int

    @property
    def clock_rate_hz(self) -> float:
        return self.clock_rate_millihz / 1000.0


def _to_millihz(clock_rate_hz: float) -> int:
    return int(round(clock_rate_hz * 1000.0))


def _check_tags(tags: np.ndarray) -> np.ndarray:
    t = np.asarray(tags, dtype=np.int64)
    if t.size and t.min() < 0:
        raise TagFileError("timestamps must be non-negative")
    return t.astype("<u8")


def write_ptag(path, tags, clock_rate_hz: float, resolution_ps: int = 1) -> None:
    t = _check_tags(getattr(tags, "tags", tags))
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, int(resolution_ps), _to_millihz(clock_rate_hz), t.size))
        fh.write(t.tobytes())


def read_header(path) -> PtagHeader:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise TagFileError(f"{path}: truncated header")
    magic, version, res, fmhz, count = HEADER.unpack(raw)
    if magic != MAGIC:
        raise TagFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TagFileError(f"{path}: unsupported version {version}")
    return PtagHeader(version, res, fmhz, count)


def read_ptag(path, mmap: bool = False) -> tuple[PtagHeader, np.ndarray]:
    """Header and int64 timestamps. ``mmap=True`` maps the body lazily."""
    hdr = read_header(path)
    size = Path(path).stat().st_size
    if size < HEADER.size + 8 * hdr.tag_count:
        raise TagFileError(f"{path}: body holds fewer than {hdr.tag_count} tags")
    if mmap:
        body = np.memmap(path, dtype="<u8", mode="r", offset=HEADER.size, shape=(hdr.tag_count,))
        return hdr, body.view(np.int64)
    with open(path, "rb") as fh:
        fh.seek(HEADER.size)
        body = np.frombuffer(fh.read(8 * hdr.tag_count), dtype="<u8")
    return hdr, body.astype(np.int64)


def iter_ptag(path, batch: int = 1 << 20):
    """Yield the timestamps of a PTAG file in batches."""
    hdr = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(HEADER.size)
        left = hdr.tag_count
        while left:
            n = min(batch, left)
            raw = fh.read(8 * n)
            if len(raw) < 8 * n:
                raise TagFileError(f"{path}: truncated body")
            yield np.frombuffer(raw, dtype="<u8").astype(np.int64)
            left -= n


class PtagWriter:
    """Append batches to a PTAG file; the count is patched on close."""

    def __init__(self, path, clock_rate_hz: float, resolution_ps: int = 1):
        self.path = Path(path)
        self._fh = open(self.path, "wb")
        self._fh.write(HEADER.pack(MAGIC, VERSION, int(resolution_ps), _to_millihz(clock_rate_hz), 0))
        self.count = 0
        self._last = -1

    def write(self, tags) -> None:
        t = _check_tags(tags)
        if t.size == 0:
            return
        if int(t[0]) <= self._last or (t.size > 1 and np.any(np.diff(t.astype(np.int64)) <= 0)):
            raise TagFileError("tags must be strictly increasing across batches")
        self._fh.write(t.tobytes())
        self.count += int(t.size)
        self._last = int(t[-1])

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(_COUNT_OFFSET)
        self._fh.write(struct.pack("<Q", self.count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


TRUTH_HEADER = ("pulse_index", "symbol", "true_time_ps")


def write_truth_csv(path, truth: Truth) -> None:
    """Signal detections only; background tags have no truth row."""
    sig = truth.pulse_index >= 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRUTH_HEADER)
        for k, s, t in zip(truth.pulse_index[sig], truth.symbol[sig], truth.true_time[sig]):
            w.writerow((int(k), Symbol(int(s)).name, repr(float(t))))


def read_truth_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r, ()))
        if header != TRUTH_HEADER:
            raise TagFileError(f"{path}: expected header {','.join(TRUTH_HEADER)}")
        rows = list(r)
    idx = np.array([int(a) for a, _, _ in rows], dtype=np.int64)
    sym = np.array([Symbol[b].value for _, b, _ in rows], dtype=np.int8)
    tt = np.array([float(c) for _, _, c in rows], dtype=np.float64)
    return idx, sym, tt


def load_stream(path) -> TagStream:
    hdr, tags = read_ptag(path)
    return TagStream(tags, None, {"clock_rate_hz": hdr.clock_rate_hz,
                                  "resolution_ps": hdr.resolution_ps})
