"""Reference model for watermark eviction, written from the policy statement
rather than from the implementation."""

from __future__ import annotations


def expected_eviction(entries: list[tuple[str, float, int, bool]], usage: int, needed: int, capacity: int,
                      low: float, exclude: str | None = None) -> list[str]:
    """entries: (path, last_access, bytes, pinned). Returns paths evicted, in order.

    Walk unpinned entries oldest-first (ties by path) and drop each until usage is
    at or below the low watermark and the incoming bytes fit in raw capacity.
    """
    order = sorted((e for e in entries if not e[3] and e[0] != exclude), key=lambda e: (e[1], e[0]))
    out = []
    for path, _, size, _ in order:
        if usage <= low * capacity and usage + needed <= capacity:
            break
        out.append(path)
        usage -= size
    return out
