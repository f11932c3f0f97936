"""Bounded frame queue between a camera producer and the SLAM consumer."""

from __future__ import annotations

import threading
from collections import deque


class EndOfStream(Exception):
    """Raised by ``pop`` once the queue is closed and drained."""


class FrameQueue:
    """FIFO of ``(timestamp, image)`` items; a full queue drops its oldest item."""

    def __init__(self, capacity: int = 8):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = int(capacity)
        self._items: deque = deque()
        self._cond = threading.Condition()
        self._closed = False
        self.dropped = 0
        self.pushed = 0

    def __len__(self):
        with self._cond:
            return len(self._items)

    @property
    def closed(self) -> bool:
        return self._closed

    def push(self, frame) -> None:
        with self._cond:
            if self._closed:
                raise EndOfStream("push on a closed stream")
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self.dropped += 1
            self._items.append(frame)
            self.pushed += 1
            self._cond.notify()

    def pop(self, timeout: float | None = None):
        """Next frame; blocks while empty. Raises EndOfStream when closed and empty."""
        with self._cond:
            if not self._cond.wait_for(lambda: self._items or self._closed, timeout):
                raise TimeoutError("no frame within timeout")
            if self._items:
                return self._items.popleft()
            raise EndOfStream("stream closed")

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __iter__(self):
        while True:
            try:
                yield self.pop()
            except EndOfStream:
                return


def stream_push(q: FrameQueue, frame) -> None:
    q.push(frame)


def stream_pop(q: FrameQueue, timeout: float | None = None):
    return q.pop(timeout)


def prefilled(frames, capacity: int | None = None) -> FrameQueue:
    """Closed queue already holding ``frames`` (single-threaded runs)."""
    frames = list(frames)
    q = FrameQueue(capacity or max(1, len(frames)))
    for f in frames:
        q.push(f)
    q.close()
    return q
