"""JSON schemas for CLI reports and run manifests.

Every numeric leaf of a report schema carries an ``x-unit`` annotation; the
helper :func:`numeric_leaves_without_unit` lets tests enforce that.
"""

from __future__ import annotations

import jsonschema

__all__ = ["REPORT_SCHEMAS", "MANIFEST_SCHEMA", "ERROR_SCHEMA", "validate_report", "numeric_leaves_without_unit"]


def num(unit: str, minimum=None, maximum=None) -> dict:
    s = {"type": "number", "x-unit": unit}
    if minimum is not None:
        s["minimum"] = minimum
    if maximum is not None:
        s["maximum"] = maximum
    return s


def integer(unit: str, minimum=None) -> dict:
    s = {"type": "integer", "x-unit": unit}
    if minimum is not None:
        s["minimum"] = minimum
    return s


def obj(props: dict, required=None, extra=False) -> dict:
    return {
        "type": "object",
        "properties": props,
        "required": sorted(props) if required is None else required,
        "additionalProperties": extra,
    }


def arr(items: dict) -> dict:
    return {"type": "array", "items": items}


STR = {"type": "string"}
BOOL = {"type": "boolean"}
FRACTION = num("fraction", 0, 1)
INDEX_LIST = arr(integer("index", 0))

_HEAD = {"subcommand": STR, "seed": integer("seed", 0)}

_DIAG = obj({
    "zero_fraction_dw": FRACTION,
    "reference_zero_fraction_dw": FRACTION,
    "new_zero_fraction_dw": FRACTION,
    "new_zero_rows_dw": INDEX_LIST,
    "underflow_by_operand": {"type": "object", "additionalProperties": FRACTION},
    "channel_norms": {"type": "object", "additionalProperties": arr(num("L2 norm", 0))},
    "degenerate": BOOL,
})

_COST = obj({
    "routed_weight_elements_per_token": integer("elements/token", 0),
    "alltoall_elements_per_token": integer("elements/token", 0),
    "dense_latent_projection_flops_per_token": integer("flops/token", 0),
    "log10_combinations": num("log10(count)", 0),
    "nonlinear_budget": integer("intermediate units (K*m)", 0),
})

REPORT_SCHEMAS = {
    "quantize": obj({
        **_HEAD,
        "shape": arr(integer("elements", 0)),
        "layout": {"type": "object"},
        "selection": {"type": "object"},
        "rounding": STR,
        "n_blocks": integer("blocks", 0),
        "ragged": BOOL,
        "global_scale": num("scale factor", 0),
        "zero_tensor": BOOL,
        "scale_saturations": integer("blocks", 0),
        "underflow_rate": FRACTION,
        "mse": num("squared value units", 0),
        "max_abs_error": num("value units", 0),
        "rht": {"type": ["object", "null"]},
    }),
    "underflow-sweep": obj({
        **_HEAD,
        "instances": integer("count", 1),
        "per_ratio": arr(obj({
            "ratio": num("magnitude ratio", 0),
            "mean_underflow_1d": FRACTION,
            "mean_underflow_2d": FRACTION,
            "fraction_2d_higher": FRACTION,
        })),
    }),
    "qtrain-step": obj({
        **_HEAD,
        "mode": {"enum": ["step", "chain"]},
        "recipe": {"type": "object"},
        "shapes": {"type": "object", "additionalProperties": arr(integer("elements", 0))},
        "diagnostics": _DIAG,
        "chain": {"type": ["object", "null"], "properties": {
            "alignment": num("Pearson r", -1, 1),
            "fc2": _DIAG,
            "attribution": {"type": "object", "additionalProperties": {
                "type": "object", "additionalProperties": {
                    "anyOf": [integer("count", 0), INDEX_LIST, FRACTION]}}},
        }},
        "max_abs_error": obj({"y": num("value units", 0), "dx": num("value units", 0),
                              "dw": num("value units", 0)}),
    }),
    "moe-cost": obj({
        **_HEAD,
        "base": {"type": "object"},
        "variants": arr(obj({"alpha": integer("ratio d/latent", 1), "config": {"type": "object"},
                             "cost": _COST, "matches_base_loads": BOOL})),
        "counterpart": {"type": "object"},
    }),
    "autoquant-solve": obj({
        **_HEAD,
        "cost_unit": {"enum": ["flops", "bits"]},
        "budget": num("cost unit", 0),
        "assignment": {"type": "object", "additionalProperties": STR},
        "units": {"type": "object", "additionalProperties": STR},
        "total_sensitivity": num("squared loss proxy", 0),
        "total_cost": num("cost unit", 0),
        "effective_bits": {"anyOf": [num("bits/parameter", 0), {"type": "null"}]},
        "brute_force_total_sensitivity": {"anyOf": [num("squared loss proxy", 0), {"type": "null"}]},
    }),
    "ssm-sim": obj({
        **_HEAD,
        "recipe": {"type": "object"},
        "T": integer("steps", 1),
        "state_dim": integer("elements", 1),
        "trials": integer("count", 1),
        "unstable_steps": INDEX_LIST,
        "max_abs_deviation": num("state units", 0),
        "identity_max_rel_error": num("relative", 0),
        "final_mean_error": arr(num("state units")),
        "final_std_error": arr(num("state units", 0)),
    }),
    "specdec-sim": obj({
        **_HEAD,
        "mode": {"enum": ["greedy", "lossless"]},
        "draft_length": integer("tokens", 0),
        "steps": integer("verification steps", 0),
        "convention": STR,
        "acceptance_length": num("tokens/verification step", 0),
        "acceptance_by_index": arr(FRACTION),
        "tokens_emitted": integer("tokens", 0),
    }),
    "merge": obj({
        **_HEAD,
        "schedule": {"type": "object"},
        "selected": arr(obj({"token_count": num("tokens", 0), "ref": {"type": ["string", "null"]}})),
        "coefficients": arr(FRACTION),
        "parameters": integer("elements", 0),
    }),
    "codec-table": obj({
        **_HEAD,
        "format": STR,
        "codes": integer("count", 0),
        "max_value": num("value units", 0),
    }),
}

MANIFEST_SCHEMA = obj({
    "subcommand": STR,
    "seed": integer("seed", 0),
    "files": {"type": "object", "additionalProperties": {"type": "string", "pattern": "^[0-9a-f]{64}$"}},
})

ERROR_SCHEMA = obj({
    "subcommand": {"type": ["string", "null"]},
    "error": obj({"type": STR, "message": STR}),
})


def validate_report(name: str, report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMAS[name])


def numeric_leaves_without_unit(schema, path="$") -> list[str]:
    """Paths of numeric schema nodes that lack ``x-unit``."""
    bad = []
    if isinstance(schema, dict):
        t = schema.get("type")
        types = t if isinstance(t, list) else [t]
        if any(x in ("number", "integer") for x in types) and "x-unit" not in schema:
            bad.append(path)
        for k, v in schema.items():
            if isinstance(v, (dict, list)):
                bad += numeric_leaves_without_unit(v, f"{path}.{k}")
    elif isinstance(schema, list):
        for i, v in enumerate(schema):
            bad += numeric_leaves_without_unit(v, f"{path}[{i}]")
    return bad
