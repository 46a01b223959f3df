"""Scalar codecs for E2M1, E4M3 and binary16, rounding modes, and Philox4x32.

Every format is described by its sorted table of non-negative finite
magnitudes. Because the bit patterns of a sign-magnitude float are ordered
exactly like the values they encode, the index into that table *is* the
magnitude part of the code, and the least significant mantissa bit is the
parity of the index. Rounding therefore reduces to a bracketing search in the
table, which keeps every format on one code path.

Overflow always saturates to the largest finite magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

__all__ = [
    "FloatFormat",
    "E2M1",
    "E4M3",
    "BINARY16",
    "RoundingMode",
    "RTNE",
    "PhiloxState",
    "philox4x32",
    "philox_next",
    "philox_uniform",
    "derive_key",
    "encode",
    "decode",
    "round_to",
    "encode_e2m1",
    "decode_e2m1",
    "encode_e4m3",
    "decode_e4m3",
    "round_binary16",
    "codec_table",
    "get_format",
]

_MASK32 = 0xFFFFFFFF

# Philox4x32 multipliers and Weyl key increments
PHILOX_M0 = 0xD2511F53
PHILOX_M1 = 0xCD9E8D57
PHILOX_W0 = 0x9E3779B9
PHILOX_W1 = 0xBB67AE85

DEFAULT_ROUNDS = 10


# --------------------------------------------------------------------------- #
# Philox
# --------------------------------------------------------------------------- #


def philox4x32(counter, key, rounds: int = DEFAULT_ROUNDS) -> np.ndarray:
    """Philox4x32-R block function, vectorized over leading dimensions.

    Parameters
    ----------
    counter : array_like, shape (..., 4)
        Four 32-bit counter words, least significant first.
    key : array_like, shape (..., 2)
        Two 32-bit key words. Broadcast against ``counter``.
    rounds : int
        Number of Philox rounds, at least 1.

    Returns
    -------
    ndarray of uint32, shape (..., 4)
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    ctr = np.asarray(counter, dtype=np.uint64) & np.uint64(_MASK32)
    k = np.asarray(key, dtype=np.uint64) & np.uint64(_MASK32)
    if ctr.shape[-1:] != (4,) or k.shape[-1:] != (2,):
        raise ValueError("counter must have trailing dim 4 and key trailing dim 2")
    shape = np.broadcast_shapes(ctr.shape[:-1], k.shape[:-1])
    c0, c1, c2, c3 = (np.broadcast_to(ctr[..., i], shape) for i in range(4))
    k0, k1 = (np.broadcast_to(k[..., i], shape) for i in range(2))
    mask = np.uint64(_MASK32)
    m0, m1 = np.uint64(PHILOX_M0), np.uint64(PHILOX_M1)
    w0, w1 = np.uint64(PHILOX_W0), np.uint64(PHILOX_W1)
    s32 = np.uint64(32)
    for r in range(rounds):
        if r:
            k0 = (k0 + w0) & mask
            k1 = (k1 + w1) & mask
        p0 = c0 * m0
        p1 = c2 * m1
        c0, c1, c2, c3 = (p1 >> s32) ^ c1 ^ k0, p1 & mask, (p0 >> s32) ^ c3 ^ k1, p0 & mask
    return np.stack([c0, c1, c2, c3], axis=-1).astype(np.uint32)


@dataclass(frozen=True)
class PhiloxState:
    """Key, 128-bit counter and round count of a Philox stream."""

    key: tuple[int, int] = (0, 0)
    counter: tuple[int, int, int, int] = (0, 0, 0, 0)
    rounds: int = DEFAULT_ROUNDS

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if len(self.key) != 2 or len(self.counter) != 4:
            raise ValueError("key needs 2 words and counter 4 words")
        if any(not 0 <= w <= _MASK32 for w in (*self.key, *self.counter)):
            raise ValueError("Philox words must be 32-bit unsigned integers")

    def counter_int(self) -> int:
        return sum(w << (32 * i) for i, w in enumerate(self.counter))


def philox_next(state: PhiloxState) -> tuple[tuple[int, int, int, int], PhiloxState]:
    """Return the output block at ``state.counter`` and the state advanced by one."""
    block = philox4x32(state.counter, state.key, state.rounds)
    nxt = (state.counter_int() + 1) & ((1 << 128) - 1)
    counter = tuple((nxt >> (32 * i)) & _MASK32 for i in range(4))
    return tuple(int(w) for w in block), replace(state, counter=counter)


def _split64(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.uint64)
    return x & np.uint64(_MASK32), x >> np.uint64(32)


def philox_uniform(key, stream, index, rounds: int = DEFAULT_ROUNDS) -> np.ndarray:
    """Uniform draws in [0, 1) under the (stream, element index) counter schedule.

    The counter for element ``index`` of call ``stream`` is
    ``(index_lo, index_hi, stream_lo, stream_hi)`` and the draw is output word 0
    scaled by 2**-32. Results depend only on (key, stream, index, rounds), never
    on traversal order.
    """
    ilo, ihi = _split64(index)
    slo, shi = _split64(stream)
    ilo, ihi, slo, shi = np.broadcast_arrays(ilo, ihi, slo, shi)
    counter = np.stack([ilo, ihi, slo, shi], axis=-1)
    words = philox4x32(counter, key, rounds)[..., 0]
    return words.astype(np.float64) * 2.0**-32


def derive_key(seed: int, *path: int) -> tuple[int, int]:
    """Fan a 64-bit seed out to a Philox key for a labelled sub-stream.

    ``path`` holds up to two non-negative integers (e.g. subcommand id and call
    index). Adding new paths never perturbs existing ones.
    """
    if len(path) > 2:
        raise ValueError("derive_key supports at most two path components")
    seed &= (1 << 64) - 1
    words = list(path) + [0] * (2 - len(path))
    a, b = (int(w) & ((1 << 64) - 1) for w in words)
    counter = (a & _MASK32, a >> 32, b & _MASK32, b >> 32)
    block = philox4x32(counter, (seed & _MASK32, seed >> 32), DEFAULT_ROUNDS)
    return int(block[0]), int(block[1])


# --------------------------------------------------------------------------- #
# Rounding modes
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class RoundingMode:
    """Round-to-nearest-even or Philox-driven stochastic rounding.

    For stochastic rounding ``key`` and ``rounds`` select the Philox stream and
    ``stream`` is the tensor-call id of the counter schedule.
    """

    kind: str = "rtne"
    key: tuple[int, int] = (0, 0)
    stream: int = 0
    rounds: int = DEFAULT_ROUNDS

    def __post_init__(self):
        if self.kind not in ("rtne", "sr"):
            raise ValueError(f"unknown rounding kind {self.kind!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    @classmethod
    def stochastic(cls, key=(0, 0), stream: int = 0, rounds: int = DEFAULT_ROUNDS) -> "RoundingMode":
        return cls("sr", tuple(int(k) for k in key), int(stream), int(rounds))

    @property
    def is_stochastic(self) -> bool:
        return self.kind == "sr"

    def with_stream(self, stream: int) -> "RoundingMode":
        return replace(self, stream=int(stream))

    def uniforms(self, n: int, offset: int = 0) -> np.ndarray:
        idx = np.arange(offset, offset + n, dtype=np.uint64)
        return philox_uniform(self.key, self.stream, idx, self.rounds)


RTNE = RoundingMode()


# --------------------------------------------------------------------------- #
# Formats
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class FloatFormat:
    """A sign-magnitude binary float format.

    ``n_finite`` is the number of non-negative finite magnitude codes; codes
    above it decode to infinity (IEEE-style) or NaN.
    """

    name: str
    exp_bits: int
    man_bits: int
    bias: int
    n_finite: int
    ieee_specials: bool = False
    magnitudes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        idx = np.arange(self.n_finite)
        e = idx >> self.man_bits
        m = idx & ((1 << self.man_bits) - 1)
        frac = m / float(1 << self.man_bits)
        mags = np.where(
            e == 0,
            frac * 2.0 ** (1 - self.bias),
            (1.0 + frac) * np.exp2(e.astype(np.float64) - self.bias),
        )
        mags.setflags(write=False)
        object.__setattr__(self, "magnitudes", mags)

    @property
    def bits(self) -> int:
        return 1 + self.exp_bits + self.man_bits

    @property
    def sign_bit(self) -> int:
        return 1 << (self.bits - 1)

    @property
    def max_value(self) -> float:
        return float(self.magnitudes[-1])

    @cached_property
    def code_dtype(self):
        return np.uint8 if self.bits <= 8 else np.uint16


E2M1 = FloatFormat("e2m1", exp_bits=2, man_bits=1, bias=1, n_finite=8)
# 0x7F/0xFF are the NaN patterns; everything else is finite.
E4M3 = FloatFormat("e4m3", exp_bits=4, man_bits=3, bias=7, n_finite=127)
BINARY16 = FloatFormat("binary16", exp_bits=5, man_bits=10, bias=15, n_finite=0x7C00, ieee_specials=True)

_FORMATS = {f.name: f for f in (E2M1, E4M3, BINARY16)}


def get_format(fmt) -> FloatFormat:
    """Look a format up by name (``e2m1``, ``e4m3``, ``binary16``) or pass one through."""
    if isinstance(fmt, FloatFormat):
        return fmt
    try:
        return _FORMATS[str(fmt).lower()]
    except KeyError:
        raise ValueError(f"unknown format {fmt!r}") from None


def encode(x, fmt, mode: RoundingMode = RTNE, offset: int = 0, uniforms=None) -> np.ndarray:
    """Encode reals into codes of ``fmt``.

    ``offset`` shifts the flat element index used by the stochastic-rounding
    counter schedule, so that a slice of a larger tensor draws the same
    randomness it would have drawn in place. ``uniforms`` (same shape as
    ``x``) supplies the stochastic-rounding draws directly and forces
    stochastic rounding; callers batching several Philox keys use it.
    """
    fmt = get_format(fmt)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{fmt.name}: non-finite input cannot be encoded")
    mags = fmt.magnitudes
    a = np.minimum(np.abs(x), mags[-1])
    hi = np.searchsorted(mags, a, side="left")
    exact = mags[hi] == a
    lo = np.where(exact, hi, hi - 1)
    lo_v = mags[lo]
    hi_v = mags[hi]
    if uniforms is not None or mode.is_stochastic:
        width = np.where(exact, 1.0, hi_v - lo_v)
        frac = np.where(exact, 0.0, (a - lo_v) / width)
        if uniforms is None:
            u = mode.uniforms(x.size, offset).reshape(x.shape)
        else:
            u = np.broadcast_to(np.asarray(uniforms, dtype=np.float64), x.shape)
        up = u < frac
    else:
        mid = 0.5 * (lo_v + hi_v)
        up = (a > mid) | ((a == mid) & (lo % 2 == 1))
        up &= ~exact
    idx = np.where(up, hi, lo).astype(np.int64)
    codes = idx | np.where(np.signbit(x), fmt.sign_bit, 0)
    return codes.astype(fmt.code_dtype)


def decode(codes, fmt) -> np.ndarray:
    """Decode codes of ``fmt`` to float64. Total over all bit patterns."""
    fmt = get_format(fmt)
    codes = np.asarray(codes).astype(np.int64)
    if np.any((codes < 0) | (codes >= (1 << fmt.bits))):
        raise ValueError(f"{fmt.name}: code outside {fmt.bits}-bit range")
    mag = codes & (fmt.sign_bit - 1)
    neg = (codes & fmt.sign_bit) != 0
    finite = mag < fmt.n_finite
    vals = fmt.magnitudes[np.minimum(mag, fmt.n_finite - 1)].copy()
    if fmt.ieee_specials:
        inf = mag == (((1 << fmt.exp_bits) - 1) << fmt.man_bits)
        vals = np.where(finite, vals, np.where(inf, np.inf, np.nan))
    else:
        vals = np.where(finite, vals, np.nan)
    return np.where(neg, -vals, vals)


def round_to(x, fmt, mode: RoundingMode = RTNE, offset: int = 0, uniforms=None) -> np.ndarray:
    """Round reals onto the grid of ``fmt`` and return them as float64."""
    return decode(encode(x, fmt, mode, offset, uniforms), fmt)


def _scalar_or_array(out, x):
    return out.item() if np.ndim(x) == 0 else out


def encode_e2m1(x, mode: RoundingMode = RTNE, offset: int = 0):
    return _scalar_or_array(encode(x, E2M1, mode, offset), x)


def decode_e2m1(code):
    return _scalar_or_array(decode(code, E2M1), code)


def encode_e4m3(x, mode: RoundingMode = RTNE, offset: int = 0):
    return _scalar_or_array(encode(x, E4M3, mode, offset), x)


def decode_e4m3(code):
    return _scalar_or_array(decode(code, E4M3), code)


def round_binary16(x, mode: RoundingMode = RTNE, offset: int = 0):
    return _scalar_or_array(round_to(x, BINARY16, mode, offset), x)


def codec_table(fmt) -> list[tuple[int, str, float]]:
    """(code, bit string, decoded value) for every pattern of a <=8-bit format."""
    fmt = get_format(fmt)
    if fmt.bits > 8:
        raise ValueError("codec tables are exported for formats of at most 8 bits")
    codes = np.arange(1 << fmt.bits)
    vals = decode(codes, fmt)
    return [(int(c), format(int(c), f"0{fmt.bits}b"), float(v)) for c, v in zip(codes, vals)]
