"""A small data federation: origins, a redirector, chunked caches, a fallback
download client, a monitoring pipeline, a caching forward proxy and a benchmark
harness comparing the two delivery paths."""

from __future__ import annotations

from .core import CHUNK_SIZE, FederationPath, FileCatalogEntry, GeoCoordinate, chunk_layout, haversine_km
from .errors import StashError

__version__ = "0.1.0"

__all__ = [
    "CHUNK_SIZE",
    "FederationPath",
    "FileCatalogEntry",
    "GeoCoordinate",
    "StashError",
    "chunk_layout",
    "haversine_km",
]
