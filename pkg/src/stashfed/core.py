"""Shared federation types: namespace paths, chunk layout, digests, geography."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, NamedTuple

from .errors import MalformedPath, OversizedChunk

CHUNK_SIZE = 24 * 2**20
DIGEST_SIZE = 32
EARTH_RADIUS_KM = 6371.0


class FederationPath(str):
    """Canonical absolute path in the global namespace.

    Construction validates but does not rewrite; use :func:`normalize_path`
    for untrusted input.
    """

    __slots__ = ()

    def __new__(cls, text: str) -> "FederationPath":
        if isinstance(text, FederationPath):
            return text
        if normalize_text(text) != text:
            raise MalformedPath(f"not a canonical federation path: {text!r}")
        return super().__new__(cls, text)

    @property
    def segments(self) -> tuple[str, ...]:
        return tuple(s for s in self.split("/") if s)

    def is_under(self, prefix: str) -> bool:
        """True when ``prefix`` is this path or one of its ancestors (segment-wise)."""
        if prefix == "/":
            return True
        return self == prefix or self.startswith(prefix + "/")

    def relative_to(self, prefix: str) -> str:
        if not self.is_under(prefix):
            raise MalformedPath(f"{self} is not under {prefix}")
        if prefix == "/":
            return self[1:]
        return self[len(prefix) + 1 :]

    def join(self, relative: str) -> "FederationPath":
        return normalize_path(self.rstrip("/") + "/" + relative)


def normalize_text(raw: str) -> str:
    if not raw:
        raise MalformedPath("empty path")
    if "\x00" in raw:
        raise MalformedPath("embedded NUL in path")
    out: list[str] = []
    for seg in raw.split("/"):
        if seg in ("", "."):
            continue
        if seg == "..":
            if not out:
                raise MalformedPath(f"path escapes the namespace root: {raw!r}")
            out.pop()
            continue
        out.append(seg)
    return "/" + "/".join(out)


def normalize_path(raw: str) -> FederationPath:
    """Canonicalize ``raw``: collapse ``//`` and ``.``, resolve ``..``, drop trailing ``/``.

    Relative input is anchored at the namespace root.
    """
    return str.__new__(FederationPath, normalize_text(raw))


class ChunkSpec(NamedTuple):
    index: int
    offset: int
    length: int

    @property
    def end(self) -> int:
        return self.offset + self.length


def chunk_count(file_size: int, chunk_size: int = CHUNK_SIZE) -> int:
    return -(-file_size // chunk_size)


def chunk_layout(file_size: int, chunk_size: int = CHUNK_SIZE) -> list[ChunkSpec]:
    if file_size < 0:
        raise ValueError("file_size must be >= 0")
    if chunk_size <= 0:
        raise ValueError("chunk_size must be > 0")
    return [
        ChunkSpec(i, i * chunk_size, min(chunk_size, file_size - i * chunk_size))
        for i in range(chunk_count(file_size, chunk_size))
    ]


def chunks_for_range(file_size: int, start: int, end: int, chunk_size: int = CHUNK_SIZE) -> range:
    """Indices of chunks overlapping the half-open byte interval [start, end)."""
    end = min(end, file_size)
    if start >= end:
        return range(0)
    return range(start // chunk_size, (end - 1) // chunk_size + 1)


def chunk_checksum(data: bytes, chunk_size: int = CHUNK_SIZE) -> bytes:
    if len(data) > chunk_size:
        raise OversizedChunk(f"chunk of {len(data)} bytes exceeds {chunk_size}")
    return hashlib.sha256(data).digest()


def iter_file_chunks(fh: BinaryIO, chunk_size: int = CHUNK_SIZE) -> Iterator[bytes]:
    while True:
        block = fh.read(chunk_size)
        if not block:
            return
        yield block


def file_chunk_digests(path: str | os.PathLike, chunk_size: int = CHUNK_SIZE) -> list[bytes]:
    with open(path, "rb") as fh:
        return [chunk_checksum(b, chunk_size) for b in iter_file_chunks(fh, chunk_size)]


@dataclass(frozen=True)
class GeoCoordinate:
    latitude: float
    longitude: float

    def __post_init__(self) -> None:
        lat, lon = float(self.latitude), float(self.longitude)
        if not (math.isfinite(lat) and -90.0 <= lat <= 90.0):
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not (math.isfinite(lon) and -180.0 <= lon <= 180.0):
            raise ValueError(f"longitude out of range: {self.longitude}")
        object.__setattr__(self, "latitude", lat)
        object.__setattr__(self, "longitude", lon)


def haversine_km(a: GeoCoordinate, b: GeoCoordinate) -> float:
    """Great-circle distance on a sphere of radius 6371 km."""
    lat1, lon1 = math.radians(a.latitude), math.radians(a.longitude)
    lat2, lon2 = math.radians(b.latitude), math.radians(b.longitude)
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


@dataclass(frozen=True)
class FileCatalogEntry:
    path: FederationPath
    size: int
    mtime: int
    permissions: int
    chunk_digests: tuple[bytes, ...] = field(default=())
    chunk_size: int = CHUNK_SIZE

    def __post_init__(self) -> None:
        object.__setattr__(self, "path", FederationPath(self.path))
        object.__setattr__(self, "chunk_digests", tuple(self.chunk_digests))
        if self.size < 0:
            raise ValueError("size must be >= 0")
        if len(self.chunk_digests) != chunk_count(self.size, self.chunk_size):
            raise ValueError(
                f"{self.path}: {len(self.chunk_digests)} digests for "
                f"{chunk_count(self.size, self.chunk_size)} chunks"
            )
        if any(len(d) != DIGEST_SIZE for d in self.chunk_digests):
            raise ValueError(f"{self.path}: digests must be {DIGEST_SIZE} bytes")

    @property
    def chunks(self) -> list[ChunkSpec]:
        return chunk_layout(self.size, self.chunk_size)

    def to_json(self) -> str:
        return json.dumps(
            {
                "path": str(self.path),
                "size": self.size,
                "mtime": self.mtime,
                "mode": format(self.permissions, "04o"),
                "chunks": [d.hex() for d in self.chunk_digests],
            },
            separators=(",", ":"),
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str | dict, chunk_size: int = CHUNK_SIZE) -> "FileCatalogEntry":
        obj = json.loads(line) if isinstance(line, str) else line
        mode = obj["mode"]
        return cls(
            path=FederationPath(obj["path"]),
            size=int(obj["size"]),
            mtime=int(obj["mtime"]),
            permissions=int(mode, 8) if isinstance(mode, str) else int(mode),
            chunk_digests=tuple(bytes.fromhex(h) for h in obj["chunks"]),
            chunk_size=chunk_size,
        )


def dump_catalog(entries: Iterable[FileCatalogEntry]) -> str:
    """Serialize to the line-oriented catalog format, sorted by path."""
    lines = [e.to_json() for e in sorted(entries, key=lambda e: e.path.encode("utf-8"))]
    return "".join(line + "\n" for line in lines)


def load_catalog(text: str, chunk_size: int = CHUNK_SIZE) -> list[FileCatalogEntry]:
    return [FileCatalogEntry.from_json(line, chunk_size) for line in text.splitlines() if line.strip()]
