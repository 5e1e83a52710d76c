"""Multiply-accumulate tally for conv/linear primitives.

Counting is off unless a :func:`count_macs` block is active, so the hot path
pays one global lookup per primitive call.
"""
from __future__ import annotations

import contextlib
from collections import defaultdict

_ACTIVE: "MacCounter | None" = None


class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_scope: dict[str, int] = defaultdict(int)
        self._scopes: list[str] = []

    def add(self, macs: int) -> None:
        self.total += int(macs)
        self.by_scope[self._scopes[-1] if self._scopes else ""] += int(macs)


def record_macs(macs: int) -> None:
    if _ACTIVE is not None:
        _ACTIVE.add(macs)


@contextlib.contextmanager
def scope(name: str):
    """Attribute MACs recorded inside the block to ``name`` (innermost wins)."""
    if _ACTIVE is None:
        yield
        return
    _ACTIVE._scopes.append(name)
    try:
        yield
    finally:
        _ACTIVE._scopes.pop()


@contextlib.contextmanager
def count_macs():
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = MacCounter()
    try:
        yield _ACTIVE
    finally:
        _ACTIVE = prev
