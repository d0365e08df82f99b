"""Multiply-accumulate instrumentation.

Primitives call :func:`record` with the number of MACs they perform. Nothing
is tallied unless a :class:`MacCounter` is active on the current thread, so
the hooks cost one attribute lookup in normal runs.

    with count_macs() as counter:
        with mac_scope("qkv_proj"):
            linear_project(x, w)
    counter.by_scope["qkv_proj"]
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from typing import Iterator, Optional

_local = threading.local()

UNSCOPED = "unscoped"


class CounterDisabledError(RuntimeError):
    pass


class MacCounter:
    """Per-thread tally of MACs, keyed by instrumentation scope.

    ``aux`` holds work that is deliberately outside the MAC model (softmax
    exponentials, divisions) so its exclusion stays visible in reports.
    """

    def __init__(self) -> None:
        self.enabled = True
        self.by_scope: Counter[str] = Counter()
        self.aux: Counter[str] = Counter()

    @property
    def total_macs(self) -> int:
        return sum(self.by_scope.values())

    def add(self, n: int, scope: str) -> None:
        if self.enabled:
            self.by_scope[scope] += int(n)

    def add_aux(self, n: int, kind: str) -> None:
        if self.enabled:
            self.aux[kind] += int(n)

    def __repr__(self) -> str:
        return f"MacCounter(total_macs={self.total_macs}, by_scope={dict(self.by_scope)})"


def active_counter() -> Optional[MacCounter]:
    return getattr(_local, "counter", None)


def current_scope() -> str:
    stack = getattr(_local, "scopes", None)
    return stack[-1] if stack else UNSCOPED


@contextmanager
def count_macs(counter: Optional[MacCounter] = None) -> Iterator[MacCounter]:
    counter = MacCounter() if counter is None else counter
    previous = active_counter()
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = previous


@contextmanager
def mac_scope(name: str) -> Iterator[None]:
    stack = getattr(_local, "scopes", None)
    if stack is None:
        stack = _local.scopes = []
    stack.append(name)
    try:
        yield
    finally:
        stack.pop()


def record(n: int) -> None:
    counter = active_counter()
    if counter is not None:
        counter.add(n, current_scope())


def record_aux(n: int, kind: str) -> None:
    counter = active_counter()
    if counter is not None:
        counter.add_aux(n, kind)
