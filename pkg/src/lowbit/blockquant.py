"""Micro-block quantization into E2M1 payloads with E4M3 block scales.

A :class:`MicroBlockTensor` stores one E2M1 code per element, one E4M3 scale
code per block and a binary32 global scale. Every layout is a rectangular
tile: a 1D block of length ``L`` along axis 1 is a ``(1, L)`` tile, along
axis 0 a ``(L, 1)`` tile, and 2D scaling uses ``(rows, cols)`` tiles. Ragged
edges produce short final blocks that are scaled independently.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import hadamard
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import numerics as nx
from ._validation import check_matrix, check_same_shape
from .tensorio import TensorFileError, read_container, write_container

__all__ = [
    "BlockLayout",
    "ScaleSelection",
    "AMAX",
    "MicroBlockTensor",
    "RhtConfig",
    "calibrate_global_scale",
    "quantize",
    "dequantize",
    "underflow_rate",
    "rht_apply",
    "rht_invert",
    "save_microblock",
    "load_microblock",
    "BlockQuantizer",
    "RandomHadamardTransform",
    "channel_suite",
    "layout_underflow",
    "spiky_blocks",
]

E2M1_MAX = nx.E2M1.max_value  # 6
E4M3_MAX = nx.E4M3.max_value  # 448
FP32_TINY = float(np.finfo(np.float32).tiny)


@dataclass(frozen=True)
class BlockLayout:
    """1D blocks along ``axis`` or 2D ``tile`` blocks."""

    kind: str = "1d"
    axis: int = 1
    block_len: int = 16
    tile: tuple[int, int] = (16, 16)

    def __post_init__(self):
        if self.kind not in ("1d", "2d"):
            raise ValueError(f"layout kind must be '1d' or '2d', got {self.kind!r}")
        if self.axis not in (0, 1, -1):
            raise ValueError(f"axis must be 0 or 1, got {self.axis}")
        if self.block_len < 1 or min(self.tile) < 1:
            raise ValueError("block sizes must be positive")
        object.__setattr__(self, "axis", self.axis % 2)
        object.__setattr__(self, "tile", tuple(int(t) for t in self.tile))

    @classmethod
    def one_d(cls, axis: int = 1, block_len: int = 16) -> "BlockLayout":
        return cls("1d", axis=axis, block_len=block_len)

    @classmethod
    def two_d(cls, rows: int = 16, cols: int = 16) -> "BlockLayout":
        return cls("2d", tile=(rows, cols))

    @property
    def block_shape(self) -> tuple[int, int]:
        if self.kind == "2d":
            return self.tile
        return (1, self.block_len) if self.axis == 1 else (self.block_len, 1)

    def grid(self, shape) -> tuple[int, int]:
        br, bc = self.block_shape
        return -(-shape[0] // br), -(-shape[1] // bc)

    def n_blocks(self, shape) -> int:
        nr, nc = self.grid(shape)
        return nr * nc

    def is_ragged(self, shape) -> bool:
        br, bc = self.block_shape
        return shape[0] % br != 0 or shape[1] % bc != 0

    def to_dict(self) -> dict:
        if self.kind == "2d":
            return {"kind": "2d", "tile": list(self.tile)}
        return {"kind": "1d", "axis": self.axis, "block_len": self.block_len}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockLayout":
        if d.get("kind") == "2d":
            return cls.two_d(*d.get("tile", (16, 16)))
        return cls.one_d(d.get("axis", 1), d.get("block_len", 16))


@dataclass(frozen=True)
class ScaleSelection:
    """Per-block scale rule: ``amax`` or an MSE sweep of shrunken amax scales."""

    kind: str = "amax"
    n_candidates: int = 32
    sweep_range: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        if self.kind not in ("amax", "mse"):
            raise ValueError(f"scale selection must be 'amax' or 'mse', got {self.kind!r}")
        if self.kind == "mse":
            lo, hi = self.sweep_range
            if self.n_candidates < 2 or not 0 < lo <= hi:
                raise ValueError("mse sweep needs >= 2 candidates and 0 < lo <= hi")
        object.__setattr__(self, "sweep_range", tuple(float(v) for v in self.sweep_range))

    def factors(self) -> np.ndarray:
        """Multipliers of the amax scale to try; 1.0 always comes first."""
        if self.kind == "amax":
            return np.array([1.0])
        sweep = np.linspace(*self.sweep_range, self.n_candidates)
        rest = np.sort(sweep[sweep != 1.0])[::-1]
        return np.concatenate([[1.0], rest])

    def to_dict(self) -> dict:
        if self.kind == "amax":
            return {"kind": "amax"}
        return {"kind": "mse", "n_candidates": self.n_candidates, "sweep_range": list(self.sweep_range)}

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleSelection":
        if d.get("kind", "amax") == "amax":
            return cls()
        return cls("mse", int(d.get("n_candidates", 32)), tuple(d.get("sweep_range", (0.5, 1.0))))


AMAX = ScaleSelection()


def _blockify(x: np.ndarray, bshape) -> np.ndarray:
    rows, cols = x.shape
    br, bc = bshape
    nr, nc = -(-rows // br), -(-cols // bc)
    pad = np.zeros((nr * br, nc * bc), dtype=x.dtype)
    pad[:rows, :cols] = x
    return pad.reshape(nr, br, nc, bc).transpose(0, 2, 1, 3).reshape(nr * nc, br * bc)


def _unblockify(blocks: np.ndarray, shape, bshape) -> np.ndarray:
    br, bc = bshape
    nr, nc = -(-shape[0] // br), -(-shape[1] // bc)
    full = blocks.reshape(nr, nc, br, bc).transpose(0, 2, 1, 3).reshape(nr * br, nc * bc)
    return full[: shape[0], : shape[1]]


def _per_element(values: np.ndarray, shape, bshape) -> np.ndarray:
    """Broadcast one value per block onto the element grid."""
    br, bc = bshape
    return _unblockify(np.repeat(values[:, None], br * bc, axis=1), shape, bshape)


def calibrate_global_scale(tensor, return_flag: bool = False):
    """Second-level binary32 scale: ``amax / (6 * 448)``.

    Clamped below by the smallest positive binary32 normal. An all-zero tensor
    gets 1.0 and, with ``return_flag``, a True zero-tensor flag.
    """
    t = check_matrix(tensor, "tensor")
    amax = float(np.max(np.abs(t)))
    if amax == 0.0:
        return (np.float32(1.0), True) if return_flag else np.float32(1.0)
    g = np.float32(max(amax / (E2M1_MAX * E4M3_MAX), FP32_TINY))
    return (g, False) if return_flag else g


@dataclass
class MicroBlockTensor:
    shape: tuple[int, int]
    codes: np.ndarray
    block_scales: np.ndarray
    global_scale: float
    layout: BlockLayout
    selection: ScaleSelection = AMAX
    zero_tensor: bool = False
    scale_saturations: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.codes.shape != self.shape:
            raise ValueError(f"codes shape {self.codes.shape} != tensor shape {self.shape}")
        if self.block_scales.shape != (self.layout.n_blocks(self.shape),):
            raise ValueError("number of block scales does not match the layout")

    @property
    def n_blocks(self) -> int:
        return self.block_scales.size

    @property
    def ragged(self) -> bool:
        return self.layout.is_ragged(self.shape)

    def block_scale_values(self) -> np.ndarray:
        """Decoded per-block scales times the global scale."""
        return nx.decode(self.block_scales, nx.E4M3) * float(self.global_scale)

    def element_scales(self) -> np.ndarray:
        return _per_element(self.block_scale_values(), self.shape, self.layout.block_shape)

    def dequantize(self) -> np.ndarray:
        return nx.decode(self.codes, nx.E2M1) * self.element_scales()

    def header(self) -> dict:
        g = np.float32(self.global_scale)
        return {
            "shape": list(self.shape),
            "element_type": "codes",
            "code_format": "e2m1",
            "scale_format": "e4m3",
            "n_blocks": self.n_blocks,
            "layout": self.layout.to_dict(),
            "selection": self.selection.to_dict(),
            "global_scale": float(g),
            "global_scale_bits": f"0x{struct.unpack('<I', g.tobytes())[0]:08x}",
            "zero_tensor": bool(self.zero_tensor),
            "scale_saturations": int(self.scale_saturations),
            **self.meta,
        }


def _e2m1_codes(scaled: np.ndarray, mode: nx.RoundingMode) -> np.ndarray:
    return nx.encode(scaled, nx.E2M1, mode)


def quantize(
    tensor,
    layout: BlockLayout | None = None,
    selection: ScaleSelection = AMAX,
    mode: nx.RoundingMode = nx.RTNE,
    global_scale: float | None = None,
) -> MicroBlockTensor:
    """Quantize a real matrix into a :class:`MicroBlockTensor`.

    Scale candidates are evaluated with round-to-nearest-even element rounding;
    the chosen scale is then applied with ``mode``. Stochastic rounding draws
    its randomness by flat row-major element index, so the result does not
    depend on the block layout traversal.
    """
    layout = layout or BlockLayout()
    x = check_matrix(tensor, "tensor")
    if global_scale is None:
        g, zero = calibrate_global_scale(x, return_flag=True)
    else:
        g, zero = np.float32(global_scale), not np.any(x)
        if not g > 0:
            raise ValueError("global scale must be positive")
    g = float(g)
    bshape = layout.block_shape
    blocks = _blockify(x, bshape)
    amax = np.max(np.abs(blocks), axis=1)

    best_codes = None
    best_err = None
    saturations = None
    for f in selection.factors():
        ratio = amax / E2M1_MAX * f / g
        sc = nx.encode(ratio, nx.E4M3)
        eff = nx.decode(sc, nx.E4M3) * g
        safe = np.where(eff > 0, eff, 1.0)
        recon = nx.round_to(blocks / safe[:, None], nx.E2M1) * eff[:, None]
        err = np.sum((recon - blocks) ** 2, axis=1)
        if best_err is None:
            best_codes, best_err = sc, err
            saturations = int(np.sum(ratio > E4M3_MAX))
        else:
            better = err < best_err
            best_codes = np.where(better, sc, best_codes)
            best_err = np.where(better, err, best_err)

    eff_el = _per_element(nx.decode(best_codes, nx.E4M3) * g, x.shape, bshape)
    live = eff_el > 0
    scaled = np.where(live, x / np.where(live, eff_el, 1.0), 0.0)
    codes = _e2m1_codes(scaled, mode)
    codes = np.where(live, codes, 0).astype(np.uint8)
    return MicroBlockTensor(
        shape=x.shape,
        codes=codes,
        block_scales=best_codes.astype(np.uint8),
        global_scale=g,
        layout=layout,
        selection=selection,
        zero_tensor=bool(zero),
        scale_saturations=saturations,
    )


def dequantize(q: MicroBlockTensor) -> np.ndarray:
    """Element = decode_e2m1(code) * decode_e4m3(block scale) * global scale."""
    return q.dequantize()


def underflow_rate(original, q) -> float:
    """Fraction of all elements that are nonzero in ``original`` but decode to 0.

    ``q`` may be a :class:`MicroBlockTensor` or an already dequantized array.
    """
    x = np.asarray(original, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    deq = q.dequantize() if isinstance(q, MicroBlockTensor) else np.asarray(q, dtype=np.float64)
    if deq.ndim == 1:
        deq = deq[None, :]
    check_same_shape(x, deq)
    if x.size == 0:
        return 0.0
    return float(np.mean((x != 0) & (deq == 0)))


# --------------------------------------------------------------------------- #
# Container files
# --------------------------------------------------------------------------- #


def save_microblock(q: MicroBlockTensor, path) -> None:
    payload = q.codes.astype("u1").tobytes(order="C") + q.block_scales.astype("u1").tobytes()
    write_container(path, q.header(), payload)


def load_microblock(path) -> MicroBlockTensor:
    header, payload = read_container(path)
    if header["element_type"] != "codes":
        raise TensorFileError(f"{path}: element_type {header['element_type']!r} is not a code container")
    shape = tuple(header["shape"])
    n = int(np.prod(shape))
    nb = int(header["n_blocks"])
    if len(payload) != n + nb:
        raise TensorFileError(f"{path}: payload size mismatch: expected {n + nb} bytes, got {len(payload)}")
    buf = np.frombuffer(payload, dtype="u1")
    g = float(np.frombuffer(struct.pack("<I", int(header["global_scale_bits"], 16)), dtype="<f4")[0])
    known = {"shape", "element_type", "code_format", "scale_format", "n_blocks", "layout", "selection",
             "global_scale", "global_scale_bits", "zero_tensor", "scale_saturations"}
    return MicroBlockTensor(
        shape=shape,
        codes=buf[:n].reshape(shape).copy(),
        block_scales=buf[n:].copy(),
        global_scale=g,
        layout=BlockLayout.from_dict(header["layout"]),
        selection=ScaleSelection.from_dict(header["selection"]),
        zero_tensor=bool(header.get("zero_tensor", False)),
        scale_saturations=int(header.get("scale_saturations", 0)),
        meta={k: v for k, v in header.items() if k not in known},
    )


# --------------------------------------------------------------------------- #
# Random Hadamard transform
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class RhtConfig:
    """Block size and sign diagonal of a random Hadamard transform.

    The signs come from Philox under (``key``, ``stream``) unless given
    explicitly.
    """

    block_size: int = 16
    key: tuple[int, int] = (0, 0)
    stream: int = 0
    rounds: int = nx.DEFAULT_ROUNDS
    signs: tuple[int, ...] | None = None

    def __post_init__(self):
        b = self.block_size
        if b < 1 or b & (b - 1):
            raise ValueError(f"block_size must be a power of two, got {b}")
        if self.signs is not None and (len(self.signs) != b or any(s not in (1, -1) for s in self.signs)):
            raise ValueError("signs must be a +/-1 sequence of length block_size")

    def sign_vector(self) -> np.ndarray:
        if self.signs is not None:
            return np.asarray(self.signs, dtype=np.float64)
        u = nx.philox_uniform(self.key, self.stream, np.arange(self.block_size, dtype=np.uint64), self.rounds)
        return np.where(u < 0.5, 1.0, -1.0)

    def matrix(self) -> np.ndarray:
        """``H_b @ diag(signs) / sqrt(b)``; orthogonal."""
        b = self.block_size
        return hadamard(b).astype(np.float64) * self.sign_vector()[None, :] / np.sqrt(b)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signs"] = [int(s) for s in self.sign_vector()]
        return d


def _segments(x: np.ndarray, b: int, axis: int):
    x = np.moveaxis(check_matrix(x, "matrix"), axis, -1)
    if x.shape[-1] % b:
        raise ValueError(f"transformed axis length {x.shape[-1]} is not a multiple of block size {b}")
    return x.reshape(*x.shape[:-1], x.shape[-1] // b, b), x.shape


def rht_apply(matrix, cfg: RhtConfig, axis: int = 1) -> np.ndarray:
    """Transform each contiguous length-``b`` segment along ``axis``."""
    seg, shape = _segments(matrix, cfg.block_size, axis)
    out = seg @ cfg.matrix().T
    return np.moveaxis(out.reshape(shape), -1, axis)


def rht_invert(matrix, cfg: RhtConfig, axis: int = 1) -> np.ndarray:
    seg, shape = _segments(matrix, cfg.block_size, axis)
    out = seg @ cfg.matrix()
    return np.moveaxis(out.reshape(shape), -1, axis)


# --------------------------------------------------------------------------- #
# Constructed diagnostic tensors
# --------------------------------------------------------------------------- #


def channel_suite(rng: np.random.Generator, rows: int = 32, cols: int = 64, ratio: float = 24.0,
                  low_every: int = 2) -> np.ndarray:
    """Gaussian channels (rows); every ``low_every``-th row is shrunk by ``ratio``."""
    if ratio <= 0 or low_every < 1:
        raise ValueError("ratio must be positive and low_every >= 1")
    x = rng.standard_normal((rows, cols))
    x[::low_every] /= ratio
    return x


def layout_underflow(tensor, block_len: int = 16, tile=(16, 16)) -> tuple[float, float]:
    """Underflow rate under per-channel 1D blocks (axis 1) and under 2D tiles."""
    u1 = underflow_rate(tensor, quantize(tensor, BlockLayout.one_d(1, block_len)))
    u2 = underflow_rate(tensor, quantize(tensor, BlockLayout.two_d(*tile)))
    return u1, u2


def spiky_blocks(rng: np.random.Generator, rows: int = 64, cols: int = 16, block_len: int = 16,
                 spike: float = 100.0, axis: int = 0) -> np.ndarray:
    """Small Gaussian values with one outlier of size ``spike`` per block along ``axis``."""
    x = rng.standard_normal((rows, cols))
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    if n % block_len:
        raise ValueError(f"axis length {n} is not a multiple of block_len {block_len}")
    seg = x.reshape(*x.shape[:-1], n // block_len, block_len)
    pos = rng.integers(0, block_len, seg.shape[:-1])
    signs = rng.choice([-1.0, 1.0], size=pos.shape)
    np.put_along_axis(seg, pos[..., None], (spike * signs)[..., None], -1)
    return np.moveaxis(seg.reshape(x.shape), -1, axis)


# --------------------------------------------------------------------------- #
# Estimators
# --------------------------------------------------------------------------- #


class BlockQuantizer(TransformerMixin, BaseEstimator):
    """Fake-quantize matrices to E2M1 micro-blocks.

    ``fit`` calibrates the global scale (static per-tensor calibration);
    ``transform`` returns the dequantized matrix and :meth:`quantize` the
    container itself. With ``calibration="dynamic"`` the global scale is
    recomputed on every call.
    """

    def __init__(
        self,
        layout="1d",
        axis=1,
        block_len=16,
        tile=(16, 16),
        scale_selection="amax",
        n_candidates=32,
        sweep_range=(0.5, 1.0),
        rounding="rtne",
        seed=0,
        stream=0,
        rounds=nx.DEFAULT_ROUNDS,
        calibration="static",
    ):
        self.layout = layout
        self.axis = axis
        self.block_len = block_len
        self.tile = tile
        self.scale_selection = scale_selection
        self.n_candidates = n_candidates
        self.sweep_range = sweep_range
        self.rounding = rounding
        self.seed = seed
        self.stream = stream
        self.rounds = rounds
        self.calibration = calibration

    def _layout(self) -> BlockLayout:
        if self.layout == "2d":
            return BlockLayout.two_d(*self.tile)
        return BlockLayout.one_d(self.axis, self.block_len)

    def _selection(self) -> ScaleSelection:
        return ScaleSelection(self.scale_selection, self.n_candidates, tuple(self.sweep_range))

    def _mode(self) -> nx.RoundingMode:
        if self.rounding == "sr":
            return nx.RoundingMode.stochastic(nx.derive_key(self.seed), self.stream, self.rounds)
        if self.rounding != "rtne":
            raise ValueError(f"rounding must be 'rtne' or 'sr', got {self.rounding!r}")
        return nx.RTNE

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self._layout(), self._selection(), self._mode()
        self.global_scale_, self.zero_tensor_ = calibrate_global_scale(X, return_flag=True)
        self.n_features_in_ = X.shape[1]
        return self

    def quantize(self, X) -> MicroBlockTensor:
        check_is_fitted(self, "global_scale_")
        X = check_array(X, dtype=np.float64)
        g = None if self.calibration == "dynamic" else self.global_scale_
        return quantize(X, self._layout(), self._selection(), self._mode(), global_scale=g)

    def transform(self, X):
        return self.quantize(X).dequantize()

    def underflow_rate(self, X) -> float:
        X = check_array(X, dtype=np.float64)
        return underflow_rate(X, self.quantize(X))


class RandomHadamardTransform(TransformerMixin, BaseEstimator):
    """Blockwise random Hadamard rotation along ``axis``."""

    def __init__(self, block_size=16, axis=1, seed=0, stream=0, rounds=nx.DEFAULT_ROUNDS):
        self.block_size = block_size
        self.axis = axis
        self.seed = seed
        self.stream = stream
        self.rounds = rounds

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[self.axis] % self.block_size:
            raise ValueError(f"axis length {X.shape[self.axis]} is not a multiple of {self.block_size}")
        self.config_ = RhtConfig(self.block_size, nx.derive_key(self.seed), self.stream, self.rounds)
        self.signs_ = self.config_.sign_vector()
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        return rht_apply(check_array(X, dtype=np.float64), self.config_, self.axis)

    def inverse_transform(self, X):
        check_is_fitted(self, "config_")
        return rht_invert(check_array(X, dtype=np.float64), self.config_, self.axis)
