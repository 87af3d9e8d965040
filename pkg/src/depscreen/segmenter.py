"""Fixed-length analysis windows.

Two policies: a single window starting at ``offset_s`` (Dataset A), and
back-to-back windows from ``offset_s`` up to ``end_s`` (Dataset B).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .audio_io import AudioBuffer
from .errors import RecordingTooShort, WindowOutOfRange

# tolerance for float round-off in second arithmetic
_EPS = 1e-9


@dataclass(frozen=True)
class SegmentPolicy:
    offset_s: float = 60.0
    window_s: float = 15.0
    end_s: float | None = None

    def __post_init__(self):
        if self.window_s <= 0:
            raise ValueError(f"window_s must be positive, got {self.window_s}")
        if self.offset_s < 0:
            raise ValueError(f"offset_s must be non-negative, got {self.offset_s}")
        if self.end_s is not None and self.end_s < self.offset_s + self.window_s:
            raise ValueError("end_s must leave room for at least one window")

    @classmethod
    def dataset_a(cls) -> "SegmentPolicy":
        return cls(60.0, 15.0, None)

    @classmethod
    def dataset_b(cls) -> "SegmentPolicy":
        return cls(60.0, 15.0, 420.0)


@dataclass(frozen=True)
class SegmentWindow:
    start_s: float
    end_s: float
    index: int

    @property
    def length_s(self) -> float:
        return self.end_s - self.start_s


def plan_segments(duration_s: float, policy: SegmentPolicy) -> list[SegmentWindow]:
    """Windows for a recording of ``duration_s`` seconds, in time order.

    Partial trailing windows are dropped.
    """
    first_end = policy.offset_s + policy.window_s
    if duration_s + _EPS < first_end:
        raise RecordingTooShort(
            f"recording is {duration_s:.3f} s; policy needs at least {first_end:g} s"
        )
    if policy.end_s is None:
        return [SegmentWindow(policy.offset_s, first_end, 0)]
    limit = min(policy.end_s, duration_s)
    count = int(math.floor((limit - policy.offset_s) / policy.window_s + _EPS))
    return [
        SegmentWindow(
            policy.offset_s + k * policy.window_s,
            policy.offset_s + (k + 1) * policy.window_s,
            k,
        )
        for k in range(count)
    ]


def window_bounds(window: SegmentWindow, sample_rate_hz: int) -> tuple[int, int]:
    lo = int(round(window.start_s * sample_rate_hz))
    hi = int(round(window.end_s * sample_rate_hz))
    return lo, hi


def extract_segment(buffer: AudioBuffer, window: SegmentWindow) -> AudioBuffer:
    lo, hi = window_bounds(window, buffer.sample_rate_hz)
    if lo < 0 or hi > len(buffer) or hi <= lo:
        raise WindowOutOfRange(
            f"window [{window.start_s:g}, {window.end_s:g}) s does not fit a "
            f"{buffer.duration_s:.3f} s buffer"
        )
    tag = f"{buffer.source_id}#{window.index}" if buffer.source_id else f"#{window.index}"
    return AudioBuffer(buffer.samples[lo:hi].copy(), buffer.sample_rate_hz, tag)


def segment_buffer(buffer: AudioBuffer, policy: SegmentPolicy) -> list[AudioBuffer]:
    return [extract_segment(buffer, w) for w in plan_segments(buffer.duration_s, policy)]
