"""Explicit byte accounting for the large intermediates (Jacobians, gradient blocks).

Algorithms report buffer requests here rather than relying on OS memory
probes, so peak figures are deterministic and portable.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

_local = threading.local()


class IntermediateMeter:
    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes: int):
        self.current += nbytes
        self.peak = max(self.peak, self.current)

    def free(self, nbytes: int):
        self.current -= nbytes


def _stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


@contextmanager
def track():
    """Meter every intermediate requested on this thread inside the block."""
    meter = IntermediateMeter()
    _stack().append(meter)
    try:
        yield meter
    finally:
        _stack().remove(meter)


def alloc(nbytes: int):
    for meter in _stack():
        meter.alloc(int(nbytes))


def free(nbytes: int):
    for meter in _stack():
        meter.free(int(nbytes))


@contextmanager
def held(nbytes: int):
    alloc(nbytes)
    try:
        yield
    finally:
        free(nbytes)
