"""AWGN link with gain equalization, plus the frame layout carried over it.

Byte layout of a serialized frame (little endian)::

    offset  size  field
    0       2     split_step   (u16, transmitter-side denoising steps a)
    2       4     label        (u32, guidance token)
    6       8     seed_tag     (u64)
    14      1     bytes per payload value (2, 4 or 8)
    15      1     layout version (1)
    16      ...   payload values (IEEE float at the stated width)

The header is delivered error-free; only payload values see channel noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .diffusion import Latent

HEADER = struct.Struct("<HIQBB")
LAYOUT_VERSION = 1
_DTYPES = {16: np.dtype("<f2"), 32: np.dtype("<f4"), 64: np.dtype("<f8")}


class ChannelError(ValueError):
    pass


class CorruptHeaderError(ChannelError):
    pass


@dataclass(frozen=True)
class ChannelModel:
    """AWGN channel. ``signal_power=None`` measures the mean square of each payload."""

    snr_db: float
    gain_h: float = 1.0
    signal_power: float | None = None

    def __post_init__(self):
        if self.gain_h <= 0:
            raise ChannelError("channel gain must be positive")
        if self.signal_power is not None and self.signal_power <= 0:
            raise ChannelError("signal power must be positive")

    def power(self, payload) -> float:
        if self.signal_power is not None:
            return float(self.signal_power)
        p = float(np.mean(np.square(payload, dtype=float)))
        if p <= 0:
            raise ChannelError("cannot measure signal power of an all-zero payload")
        return p

    def noise_variance(self, payload=None) -> float:
        """Per-dimension receiver noise variance ``P h^2 / 10^(snr/10)``."""
        return self.power(payload) * self.gain_h ** 2 / 10.0 ** (self.snr_db / 10.0)


@dataclass(frozen=True)
class FrameHeader:
    split_step: int
    label: int
    seed_tag: int = 0

    def __post_init__(self):
        if not 0 <= self.split_step < 2 ** 16:
            raise ChannelError("split_step does not fit in u16")
        if not 0 <= self.label < 2 ** 32:
            raise ChannelError("label does not fit in u32")
        if not 0 <= self.seed_tag < 2 ** 64:
            raise ChannelError("seed_tag does not fit in u64")


@dataclass(frozen=True, eq=False)
class Frame:
    header: FrameHeader
    payload: np.ndarray
    bits_per_value: int = 32

    @property
    def size_bits(self) -> int:
        return int(self.payload.size) * self.bits_per_value

    def to_bytes(self) -> bytes:
        h = self.header
        head = HEADER.pack(h.split_step, h.label, h.seed_tag, self.bits_per_value // 8, LAYOUT_VERSION)
        return head + self.payload.astype(_DTYPES[self.bits_per_value]).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, shape=None) -> "Frame":
        if len(buf) < HEADER.size:
            raise CorruptHeaderError("frame shorter than its header")
        a, label, seed_tag, width, version = HEADER.unpack_from(buf)
        if version != LAYOUT_VERSION or width * 8 not in _DTYPES:
            raise CorruptHeaderError(f"unsupported layout (version={version}, width={width})")
        bits = width * 8
        body = buf[HEADER.size:]
        if len(body) % width:
            raise CorruptHeaderError("payload length is not a whole number of values")
        payload = np.frombuffer(body, dtype=_DTYPES[bits]).copy()
        if shape is not None:
            payload = payload.reshape(shape)
        return cls(FrameHeader(a, label, seed_tag), payload, bits)


def channel_encode(z: Latent, split_step: int, label: int, seed_tag: int = 0,
                   bits_per_value: int = 32) -> Frame:
    if bits_per_value not in _DTYPES:
        raise ChannelError(f"unsupported precision {bits_per_value}")
    payload = np.asarray(z.values).astype(_DTYPES[bits_per_value])
    return Frame(FrameHeader(split_step, label, seed_tag), payload, bits_per_value)


def transmit(f: Frame, ch: ChannelModel, rng=None) -> Frame:
    """``y' = h y + n`` per payload value; the received payload is kept at float64."""
    rng = np.random.default_rng(rng)
    y = f.payload.astype(float)
    std = np.sqrt(ch.noise_variance(y))
    received = ch.gain_h * y + std * rng.standard_normal(y.shape)
    return Frame(f.header, received, 64 if f.bits_per_value == 64 else f.bits_per_value)


def channel_decode(f: Frame, ch: ChannelModel, total_steps: int | None = None):
    """Equalize by the channel gain. The latent step is ``total_steps - split_step`` when known."""
    h = f.header
    if not isinstance(h, FrameHeader):
        raise CorruptHeaderError("missing frame header")
    step = 0
    if total_steps is not None:
        if h.split_step > total_steps:
            raise CorruptHeaderError(f"split step {h.split_step} exceeds {total_steps} total steps")
        step = total_steps - h.split_step
    return Latent(np.asarray(f.payload, dtype=float) / ch.gain_h, step), h


def semantic_noise_std(ch: ChannelModel, payload=None) -> float:
    """Std of the semantic noise after equalization, ``sqrt(P / 10^(snr/10))``; independent of h."""
    return float(np.sqrt(ch.power(payload) / 10.0 ** (ch.snr_db / 10.0)))
