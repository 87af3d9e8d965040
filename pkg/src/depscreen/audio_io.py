"""RIFF/WAVE PCM16 reader and writer."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedContainer, UnsupportedFormat

PCM = 0x0001
PCM16_SCALE = 32768.0


@dataclass
class AudioBuffer:
    """Mono samples in [-1, 1) at ``sample_rate_hz``."""

    samples: np.ndarray
    sample_rate_hz: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioBuffer samples must be one-dimensional")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class WavHeader:
    sample_rate_hz: int
    bits_per_sample: int
    num_channels: int
    num_frames: int


@dataclass
class _Chunks:
    fmt: bytes | None = None
    data_offset: int = -1
    data_size: int = -1
    others: list = field(default_factory=list)


def _is_fourcc(tag: bytes) -> bool:
    return len(tag) == 4 and all(0x20 <= b <= 0x7E for b in tag)


def _walk_chunks(data: bytes) -> _Chunks:
    if len(data) < 12:
        raise MalformedContainer(f"file too short for a RIFF header ({len(data)} bytes)")
    if data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedContainer("missing RIFF/WAVE magic")
    riff_size = struct.unpack_from("<I", data, 4)[0]
    if riff_size + 8 != len(data):
        raise MalformedContainer(
            f"RIFF size field says {riff_size + 8} bytes, file has {len(data)}"
        )

    chunks = _Chunks()
    pos = 12
    while pos < len(data):
        if len(data) - pos < 8:
            raise MalformedContainer(f"truncated chunk header at byte {pos}")
        tag = data[pos:pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        if not _is_fourcc(tag):
            raise MalformedContainer(f"invalid chunk id {tag!r} at byte {pos}")
        body = pos + 8
        end = body + size
        if end > len(data):
            raise MalformedContainer(
                f"chunk {tag.decode('ascii')!r} at byte {pos} runs past end of file"
            )
        if tag == b"fmt ":
            if chunks.fmt is not None:
                raise MalformedContainer("duplicate fmt chunk")
            chunks.fmt = data[body:end]
        elif tag == b"data":
            if chunks.data_offset >= 0:
                raise MalformedContainer("duplicate data chunk")
            if chunks.fmt is None:
                raise MalformedContainer("data chunk precedes fmt chunk")
            chunks.data_offset, chunks.data_size = body, size
        else:
            # LIST, fact, cue and friends are skipped
            chunks.others.append(tag)
        pos = end + (size & 1)
        if pos > len(data):
            raise MalformedContainer(f"missing pad byte after odd-sized chunk {tag!r}")
    if chunks.fmt is None:
        raise MalformedContainer("no fmt chunk")
    if chunks.data_offset < 0:
        raise MalformedContainer("no data chunk")
    return chunks


def _read_fmt(fmt: bytes) -> tuple[int, int, int, int]:
    if len(fmt) < 16:
        raise MalformedContainer(f"fmt chunk is {len(fmt)} bytes, need at least 16")
    tag, channels, rate, byte_rate, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag != PCM:
        raise UnsupportedFormat(f"format code {tag:#06x} is not PCM")
    if bits != 16:
        raise UnsupportedFormat(f"{bits}-bit samples are not supported (16 only)")
    if channels not in (1, 2):
        raise UnsupportedFormat(f"{channels} channels are not supported (mono or stereo)")
    if rate == 0:
        raise MalformedContainer("sample rate of zero")
    if block_align != channels * 2:
        raise MalformedContainer(
            f"block align {block_align} inconsistent with {channels} x 16-bit"
        )
    return channels, rate, bits, block_align


def parse_wav(data: bytes) -> tuple[WavHeader, AudioBuffer]:
    """Decode a PCM16 WAV byte string.

    Stereo frames are averaged to mono; samples are scaled by 1/32768.
    Raises ``MalformedContainer`` for structural damage and
    ``UnsupportedFormat`` for valid RIFF files outside the PCM16 subset.
    """
    data = bytes(data)
    chunks = _walk_chunks(data)
    channels, rate, bits, block_align = _read_fmt(chunks.fmt)
    if chunks.data_size % block_align:
        raise MalformedContainer(
            f"data chunk of {chunks.data_size} bytes is not a whole number of frames"
        )
    n_frames = chunks.data_size // block_align
    raw = np.frombuffer(
        data, dtype="<i2", count=n_frames * channels, offset=chunks.data_offset
    )
    if channels == 2:
        raw = raw.reshape(n_frames, 2).astype(np.float64).mean(axis=1)
    samples = raw.astype(np.float64) / PCM16_SCALE
    header = WavHeader(rate, bits, channels, n_frames)
    return header, AudioBuffer(samples, rate)


def read_header(data: bytes) -> WavHeader:
    chunks = _walk_chunks(data)
    channels, rate, bits, block_align = _read_fmt(chunks.fmt)
    if chunks.data_size % block_align:
        raise MalformedContainer("data chunk is not a whole number of frames")
    return WavHeader(rate, bits, channels, chunks.data_size // block_align)


def quantize(samples) -> np.ndarray:
    """Map [-1, 1) floats onto the int16 grid (round to nearest, saturate)."""
    q = np.round(np.asarray(samples, dtype=np.float64) * PCM16_SCALE)
    return np.clip(q, -32768, 32767).astype("<i2")


def encode_wav(buffer: AudioBuffer) -> bytes:
    if len(buffer) == 0:
        raise ValueError("cannot encode an empty AudioBuffer")
    payload = quantize(buffer.samples).tobytes()
    rate = buffer.sample_rate_hz
    fmt = struct.pack("<HHIIHH", PCM, 1, rate, rate * 2, 2, 16)
    body = (
        b"WAVE"
        + b"fmt " + struct.pack("<I", len(fmt)) + fmt
        + b"data" + struct.pack("<I", len(payload)) + payload
    )
    if len(payload) & 1:  # pragma: no cover - PCM16 mono is always even
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def read_wav(path) -> AudioBuffer:
    path = Path(path)
    _, buf = parse_wav(path.read_bytes())
    buf.source_id = path.stem
    return buf


def write_wav(path, buffer: AudioBuffer) -> None:
    Path(path).write_bytes(encode_wav(buffer))
