"""Fake-quantized emulation of a linear layer's fprop, dgrad and wgrad GEMMs.

Convention: ``x`` is (tokens, in), ``w`` is (out, in), ``g_out`` is
(tokens, out) and

    y  = x @ w.T         (fprop, reduction over ``in``)
    dx = g_out @ w       (dgrad, reduction over ``out``)
    dw = g_out.T @ x     (wgrad, reduction over tokens)

Each GEMM runs in float64 on operands that were quantized and dequantized
according to a :class:`PassRecipe`. 1D block formats always run along the
GEMM's reduction axis; 2D weight tiles are transposition-invariant, so the
same quantized weight serves fprop and dgrad.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from ._validation import check_matrix
from .blockquant import (
    AMAX,
    BlockLayout,
    RhtConfig,
    ScaleSelection,
    _blockify,
    _per_element,
    quantize,
    rht_apply,
    underflow_rate,
)

__all__ = [
    "OperandFormat",
    "PassRecipe",
    "StepDiagnostics",
    "StepResult",
    "ChainResult",
    "EXACT",
    "NVFP4_1D",
    "NVFP4_2D",
    "MXFP8",
    "BINARY16_FMT",
    "default_recipe",
    "exact_recipe",
    "fake_quantize",
    "linear_step",
    "two_layer_chain",
]

OPERANDS = ("fprop.x", "fprop.w", "dgrad.g", "dgrad.w", "wgrad.g", "wgrad.x")
# reduction axis of each operand as stored
_REDUCTION_AXIS = {"fprop.x": 1, "fprop.w": 1, "dgrad.g": 1, "dgrad.w": 0, "wgrad.g": 0, "wgrad.x": 0}
_GRADIENT_OPERANDS = {"dgrad.g", "wgrad.g"}
_STREAM_IDS = {name: i + 1 for i, name in enumerate(OPERANDS)}


@dataclass(frozen=True)
class OperandFormat:
    """How one GEMM operand is represented.

    kind is ``exact``, ``nvfp4`` (E2M1 + E4M3 block scales), ``mxfp8`` (E4M3
    elements, binary32 scale per 1D block of ``block_len``) or ``binary16``.
    """

    kind: str = "exact"
    blocks: str = "1d"
    block_len: int = 16
    tile: tuple[int, int] = (16, 16)
    selection: ScaleSelection = AMAX

    def __post_init__(self):
        if self.kind not in ("exact", "nvfp4", "mxfp8", "binary16"):
            raise ValueError(f"unknown operand format {self.kind!r}")
        if self.blocks not in ("1d", "2d"):
            raise ValueError("blocks must be '1d' or '2d'")

    def layout(self, reduction_axis: int) -> BlockLayout:
        if self.blocks == "2d":
            return BlockLayout.two_d(*self.tile)
        return BlockLayout.one_d(reduction_axis, self.block_len)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("nvfp4", "mxfp8"):
            d.update(blocks=self.blocks, block_len=self.block_len, tile=list(self.tile))
        if self.kind == "nvfp4":
            d["selection"] = self.selection.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "OperandFormat":
        if isinstance(d, str):
            return {"exact": EXACT, "nvfp4": NVFP4_1D, "nvfp4_2d": NVFP4_2D, "mxfp8": MXFP8,
                    "binary16": BINARY16_FMT}[d]
        sel = ScaleSelection.from_dict(d.get("selection", {}))
        return cls(d.get("kind", "exact"), d.get("blocks", "1d"), int(d.get("block_len", 16)),
                   tuple(d.get("tile", (16, 16))), sel)


EXACT = OperandFormat()
NVFP4_1D = OperandFormat("nvfp4", "1d")
NVFP4_2D = OperandFormat("nvfp4", "2d")
MXFP8 = OperandFormat("mxfp8", "1d", block_len=32)
BINARY16_FMT = OperandFormat("binary16")


@dataclass(frozen=True)
class PassRecipe:
    """Operand formats for the three GEMMs plus the wgrad RHT and gradient SR switches."""

    formats: dict = field(default_factory=lambda: {k: EXACT for k in OPERANDS})
    wgrad_rht: bool = False
    rht_block: int = 16
    gradient_sr: bool = False
    seed: int = 0
    sr_rounds: int = nx.DEFAULT_ROUNDS

    def __post_init__(self):
        missing = set(OPERANDS) - set(self.formats)
        if missing:
            raise ValueError(f"recipe lacks formats for {sorted(missing)}")

    def with_format(self, operand: str, fmt: OperandFormat) -> "PassRecipe":
        if operand not in OPERANDS:
            raise ValueError(f"unknown operand {operand!r}")
        return replace(self, formats={**self.formats, operand: fmt})

    def to_dict(self) -> dict:
        return {
            "formats": {k: self.formats[k].to_dict() for k in OPERANDS},
            "wgrad_rht": self.wgrad_rht,
            "rht_block": self.rht_block,
            "gradient_sr": self.gradient_sr,
            "seed": self.seed,
            "sr_rounds": self.sr_rounds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PassRecipe":
        base = default_recipe() if d.get("preset", "default") == "default" else exact_recipe()
        formats = dict(base.formats)
        for k, v in d.get("formats", {}).items():
            if k not in OPERANDS:
                raise ValueError(f"unknown operand {k!r}")
            formats[k] = OperandFormat.from_dict(v)
        return cls(
            formats=formats,
            wgrad_rht=bool(d.get("wgrad_rht", base.wgrad_rht)),
            rht_block=int(d.get("rht_block", base.rht_block)),
            gradient_sr=bool(d.get("gradient_sr", base.gradient_sr)),
            seed=int(d.get("seed", base.seed)),
            sr_rounds=int(d.get("sr_rounds", base.sr_rounds)),
        )


def exact_recipe() -> PassRecipe:
    return PassRecipe()


def default_recipe(seed: int = 0) -> PassRecipe:
    """2D NVFP4 weights, 1D NVFP4 activations and gradients, RHT on wgrad inputs, SR on gradients."""
    formats = {k: NVFP4_1D for k in OPERANDS}
    formats["fprop.w"] = NVFP4_2D
    formats["dgrad.w"] = NVFP4_2D
    return PassRecipe(formats=formats, wgrad_rht=True, gradient_sr=True, seed=seed)


def fake_quantize(x: np.ndarray, fmt: OperandFormat, reduction_axis: int,
                  mode: nx.RoundingMode = nx.RTNE) -> np.ndarray:
    """Quantize then dequantize ``x`` under ``fmt``."""
    if fmt.kind == "exact":
        return x.copy()
    if fmt.kind == "binary16":
        return nx.round_to(x, nx.BINARY16, mode)
    if fmt.kind == "nvfp4":
        return quantize(x, fmt.layout(reduction_axis), fmt.selection, mode).dequantize()
    return _mxfp8(x, fmt.layout(reduction_axis), mode)


def _mxfp8(x: np.ndarray, layout: BlockLayout, mode: nx.RoundingMode) -> np.ndarray:
    amax = np.max(np.abs(_blockify(x, layout.block_shape)), axis=1)
    scale = (amax / nx.E4M3.max_value).astype(np.float32).astype(np.float64)
    s_el = _per_element(scale, x.shape, layout.block_shape)
    live = s_el > 0
    scaled = np.where(live, x / np.where(live, s_el, 1.0), 0.0)
    return np.where(live, nx.round_to(scaled, nx.E4M3, mode) * s_el, 0.0)


@dataclass
class StepDiagnostics:
    zero_fraction_dw: float
    reference_zero_fraction_dw: float
    new_zero_fraction_dw: float
    new_zero_rows_dw: list
    underflow_by_operand: dict
    channel_norms: dict
    degenerate: bool = False

    def to_record(self) -> dict:
        return {
            "zero_fraction_dw": self.zero_fraction_dw,
            "reference_zero_fraction_dw": self.reference_zero_fraction_dw,
            "new_zero_fraction_dw": self.new_zero_fraction_dw,
            "new_zero_rows_dw": [int(r) for r in self.new_zero_rows_dw],
            "underflow_by_operand": dict(self.underflow_by_operand),
            "channel_norms": {k: [float(v) for v in vals] for k, vals in self.channel_norms.items()},
            "degenerate": self.degenerate,
        }


@dataclass
class StepResult:
    y: np.ndarray
    dx: np.ndarray
    dw: np.ndarray
    diagnostics: StepDiagnostics
    operands: dict = field(repr=False, default_factory=dict)


def _mode_for(recipe: PassRecipe, operand: str, call: int) -> nx.RoundingMode:
    if recipe.gradient_sr and operand in _GRADIENT_OPERANDS:
        key = nx.derive_key(recipe.seed, call)
        return nx.RoundingMode.stochastic(key, _STREAM_IDS[operand], recipe.sr_rounds)
    return nx.RTNE


def _check_shapes(x, w, g_out):
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"x has {x.shape[1]} input features but w expects {w.shape[1]}")
    if g_out.shape != (x.shape[0], w.shape[0]):
        raise ValueError(f"g_out shape {g_out.shape} != (tokens, out) = {(x.shape[0], w.shape[0])}")


def linear_step(x, w, g_out, recipe: PassRecipe | None = None, call: int = 0) -> StepResult:
    """One fake-quantized training step of ``y = x @ w.T``.

    ``call`` indexes the step within a run; it selects the stochastic-rounding
    key so repeated steps draw fresh but reproducible randomness.
    """
    recipe = recipe or default_recipe()
    x = check_matrix(x, "x")
    w = check_matrix(w, "w")
    g_out = check_matrix(g_out, "g_out")
    _check_shapes(x, w, g_out)

    raw = {"fprop.x": x, "fprop.w": w, "dgrad.g": g_out, "dgrad.w": w, "wgrad.g": g_out, "wgrad.x": x}
    rht = None
    # RHT only matters when a wgrad operand is actually quantized
    if recipe.wgrad_rht and any(recipe.formats[k].kind != "exact" for k in ("wgrad.g", "wgrad.x")):
        if x.shape[0] % recipe.rht_block:
            raise ValueError(f"token count {x.shape[0]} is not a multiple of the RHT block {recipe.rht_block}")
        rht = RhtConfig(recipe.rht_block, nx.derive_key(recipe.seed, call), stream=0)
        raw["wgrad.g"] = rht_apply(g_out, rht, axis=0)
        raw["wgrad.x"] = rht_apply(x, rht, axis=0)

    q = {}
    underflow = {}
    for name in OPERANDS:
        fmt = recipe.formats[name]
        if name == "dgrad.w" and fmt == recipe.formats["fprop.w"] and fmt.blocks == "2d" and "fprop.w" in q:
            q[name] = q["fprop.w"]
        else:
            q[name] = fake_quantize(raw[name], fmt, _REDUCTION_AXIS[name], _mode_for(recipe, name, call))
        underflow[name] = underflow_rate(raw[name], q[name])

    y = q["fprop.x"] @ q["fprop.w"].T
    dx = q["dgrad.g"] @ q["dgrad.w"]
    dw = q["wgrad.g"].T @ q["wgrad.x"]

    dw_ref = g_out.T @ x
    zero = dw == 0
    new_zero = zero & (dw_ref != 0)
    rows = _dead_lines(new_zero, dw_ref, axis=1)
    diag = StepDiagnostics(
        zero_fraction_dw=float(np.mean(zero)),
        reference_zero_fraction_dw=float(np.mean(dw_ref == 0)),
        new_zero_fraction_dw=float(np.mean(new_zero)),
        new_zero_rows_dw=rows,
        underflow_by_operand={k: float(v) for k, v in underflow.items()},
        channel_norms={
            "w_out_channels": np.linalg.norm(w, axis=1),
            "w_in_channels": np.linalg.norm(w, axis=0),
        },
        degenerate=not np.any(g_out),
    )
    return StepResult(y, dx, dw, diag, operands=q)


@dataclass
class ChainResult:
    fc1: StepResult
    fc2: StepResult
    alignment: float
    attribution: dict
    h: np.ndarray = field(repr=False, default=None)

    def to_record(self) -> dict:
        return {
            "alignment": self.alignment,
            "attribution": self.attribution,
            "fc1": self.fc1.diagnostics.to_record(),
            "fc2": self.fc2.diagnostics.to_record(),
        }


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / den) if den > 0 else 0.0


def _dead_lines(new_zero: np.ndarray, ref: np.ndarray, axis: int) -> list[int]:
    """Rows (axis=1) or columns (axis=0) whose every nonzero reference entry became zero."""
    dead = np.all(new_zero | (ref == 0), axis=axis) & np.any(new_zero, axis=axis)
    return np.flatnonzero(dead).tolist()


def two_layer_chain(x, w1, w2, g_out, recipe: PassRecipe | None = None, call: int = 0) -> ChainResult:
    """Forward and backward through FC1 -> FC2 with an identity activation.

    FC1 is (hidden, in) and FC2 is (out, hidden). The upstream gradient of FC1
    is FC2's quantized dgrad output and FC2's activation input is FC1's
    quantized fprop output, so underflows propagate the way they do in a real
    network. Weight-gradient zeros that are absent from the exact chain are
    attributed to the upstream GEMM when the whole feeding column vanished
    there, and to the layer's own wgrad quantization otherwise.
    """
    recipe = recipe or default_recipe()
    x = check_matrix(x, "x")
    w1 = check_matrix(w1, "w1")
    w2 = check_matrix(w2, "w2")
    g_out = check_matrix(g_out, "g_out")
    if w2.shape[1] != w1.shape[0]:
        raise ValueError(f"FC2 input width {w2.shape[1]} != FC1 output width {w1.shape[0]}")

    h_exact = x @ w1.T
    dh_exact = g_out @ w2

    fwd1 = linear_step(x, w1, np.zeros((x.shape[0], w1.shape[0])), recipe, call=2 * call)
    h = fwd1.y
    fc2 = linear_step(h, w2, g_out, recipe, call=2 * call + 1)
    dh = fc2.dx
    fc1 = linear_step(x, w1, dh, recipe, call=2 * call)

    dw1_ref = dh_exact.T @ x
    dw2_ref = g_out.T @ h_exact
    new1 = (fc1.dw == 0) & (dw1_ref != 0)
    new2 = (fc2.dw == 0) & (dw2_ref != 0)
    dead_dh = ~np.any(dh, axis=0) & np.any(dh_exact, axis=0)
    dead_h = ~np.any(h, axis=0) & np.any(h_exact, axis=0)
    up1 = int(np.sum(new1 & dead_dh[:, None]))
    up2 = int(np.sum(new2 & dead_h[None, :]))
    k1, k2 = int(new1.sum()), int(new2.sum())
    attribution = {
        "fc1": {
            "new_zeros": k1,
            "zero_rows": _dead_lines(new1, dw1_ref, axis=1),
            "from_dgrad_fc2": up1 / k1 if k1 else 0.0,
            "from_wgrad_fc1": (k1 - up1) / k1 if k1 else 0.0,
        },
        "fc2": {
            "new_zeros": k2,
            "zero_cols": _dead_lines(new2, dw2_ref, axis=0),
            "from_fprop_fc1": up2 / k2 if k2 else 0.0,
            "from_wgrad_fc2": (k2 - up2) / k2 if k2 else 0.0,
        },
    }
    alignment = _pearson(np.linalg.norm(w1, axis=1), np.linalg.norm(w2, axis=0))
    return ChainResult(fc1=fc1, fc2=fc2, alignment=alignment, attribution=attribution, h=h)
