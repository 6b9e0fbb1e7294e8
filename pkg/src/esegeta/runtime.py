"""Cooperative cancellation and keyed random streams shared by all methods."""

from __future__ import annotations

import threading
import time
import zlib
from typing import Optional

import numpy as np


class MethodTimeout(RuntimeError):
    """Raised at a cancellation checkpoint once the method's deadline has passed."""


class CancelToken:
    def __init__(self, timeout_s: Optional[float] = None):
        self._deadline = None if timeout_s is None else time.monotonic() + timeout_s
        self._flag = threading.Event()

    def cancel(self) -> None:
        self._flag.set()

    @property
    def cancelled(self) -> bool:
        if self._flag.is_set():
            return True
        if self._deadline is not None and time.monotonic() >= self._deadline:
            self._flag.set()
            return True
        return False

    def check(self) -> None:
        if self.cancelled:
            raise MethodTimeout("deadline exceeded")


def checkpoint(cancel: Optional[CancelToken]) -> None:
    if cancel is not None:
        cancel.check()


def sample_rng(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Independent generator keyed on (seed, stream, index).

    Sample `index` draws the same values whatever order or thread evaluates it.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode()), int(index)])
