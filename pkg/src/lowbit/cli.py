"""Command-line drivers.

Every subcommand takes ``--out DIR`` plus an optional ``--config`` JSON file,
``--set key=value`` overrides (dotted keys reach into nested blocks, values
parse as JSON when possible) and ``--seed``. The run directory receives the
resolved ``config.json``, a schema-validated ``report.json``, any tensors or
CSV files, and ``manifest.json`` with the SHA-256 of every file. Outputs are
a pure function of the resolved config and input files.

On a validation failure the process exits with status 2 and writes
``error.json``.

Random streams: SR and RHT keys are ``derive_key(seed, subcommand id)``;
synthetic data comes from a numpy generator seeded with
``(seed, subcommand id, item)``.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import sys

import jsonschema
import numpy as np

from . import autoquant as aq
from . import blockquant as bq
from . import merge as mg
from . import moe
from . import numerics as nx
from . import qtrain as qt
from . import specdec as sd
from . import ssmsim as ss
from .reports import ERROR_SCHEMA, MANIFEST_SCHEMA, validate_report
from .tensorio import read_tensor, write_tensor

SUBCOMMAND_IDS = {
    "quantize": 1,
    "underflow-sweep": 2,
    "qtrain-step": 3,
    "moe-cost": 4,
    "autoquant-solve": 5,
    "ssm-sim": 6,
    "specdec-sim": 7,
    "merge": 8,
    "codec-table": 9,
}

DEFAULTS = {
    "quantize": {
        "input": None,
        "random": {"rows": 64, "cols": 64, "scale": 1.0},
        "layout": "1d",
        "axis": 1,
        "block_len": 16,
        "tile": [16, 16],
        "selection": "amax",
        "n_candidates": 32,
        "sweep_range": [0.5, 1.0],
        "rounding": "rtne",
        "rounds": nx.DEFAULT_ROUNDS,
        "rht": False,
        "rht_block": 16,
    },
    "underflow-sweep": {
        "ratios": [1.0, 4.0, 24.0, 100.0],
        "instances": 100,
        "rows": 32,
        "cols": 64,
        "low_every": 2,
        "block_len": 16,
        "tile": [16, 16],
    },
    "qtrain-step": {
        "mode": "step",
        "inputs": None,
        "tokens": 64,
        "d_in": 64,
        "d_hidden": 64,
        "d_out": 64,
        "low_channel_fraction": 0.0,
        "low_channel_scale": 1e-6,
        "recipe": "default",
        "call": 0,
    },
    "moe-cost": {
        "d": 1024,
        "latent": 1024,
        "n_experts": 64,
        "top_k": 4,
        "m": 512,
        "shared_intermediate": 0,
        "matrices_per_expert": 2,
        "alphas": [1, 2, 4],
    },
    "autoquant-solve": {
        "problem": None,
        "problem_path": None,
        "verify": True,
        "max_verify_units": 12,
    },
    "ssm-sim": {
        "spec": {"kind": "accumulation", "T": 1000, "c": 2.0**-14, "h0": 1.0, "state_dim": 1},
        "recipe": {"variant": "binary16_rtne", "philox_rounds": 5, "block_len": 128},
        "trials": 1,
        "identity_checks": 16,
        "write_trace": False,
    },
    "specdec-sim": {
        "target": {"kind": "random", "vocab": 8, "window": 1, "concentration": 0.5},
        "drafter": {"kind": "mix", "lam": 0.3},
        "draft_length": 7,
        "steps": 1000,
        "mode": "greedy",
        "include_verifier_token": True,
    },
    "merge": {
        "checkpoints": None,
        "random": {"count": 8, "interval_tokens": 25.0, "shape": [16, 16]},
        "window_tokens": 125.0,
        "scheme": "minus_sqrt",
        "peak_lr": 1.0,
        "min_lr": 0.0,
        "horizon": None,
    },
    "codec-table": {"format": "e2m1"},
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# Config handling
# --------------------------------------------------------------------------- #


def _schema_for(value):
    if value is None:
        return {}
    if isinstance(value, bool):
        return {"type": "boolean"}
    if isinstance(value, int):
        return {"type": "integer"}
    if isinstance(value, float):
        return {"type": "number"}
    if isinstance(value, str):
        return {"type": "string"}
    if isinstance(value, list):
        return {"type": "array"}
    return {"type": "object"}


def config_schema(subcommand: str) -> dict:
    d = DEFAULTS[subcommand]
    return {"type": "object", "properties": {k: _schema_for(v) for k, v in d.items()}, "additionalProperties": False}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = _parse_value(value)


def resolve_config(subcommand: str, config_path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS[subcommand])
    if config_path:
        try:
            with open(config_path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: malformed JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
        cfg.update(user)
    for o in overrides:
        _apply_override(cfg, o)
    try:
        jsonschema.validate(cfg, config_schema(subcommand))
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from None
    return cfg


def _rng(seed: int, subcommand: str, *item: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, seed >> 32, SUBCOMMAND_IDS[subcommand], *item])


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_text(path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #


def cmd_quantize(cfg, seed, out):
    if cfg["input"]:
        x = read_tensor(cfg["input"])
    else:
        r = cfg["random"]
        x = r.get("scale", 1.0) * _rng(seed, "quantize").standard_normal((int(r["rows"]), int(r["cols"])))
    if cfg["layout"] == "1d":
        layout = bq.BlockLayout.one_d(cfg["axis"], cfg["block_len"])
    elif cfg["layout"] == "2d":
        layout = bq.BlockLayout.two_d(*cfg["tile"])
    else:
        raise ConfigError(f"layout must be '1d' or '2d', got {cfg['layout']!r}")
    selection = bq.ScaleSelection(cfg["selection"], cfg["n_candidates"], tuple(cfg["sweep_range"]))
    key = nx.derive_key(seed, SUBCOMMAND_IDS["quantize"])
    if cfg["rounding"] == "sr":
        mode = nx.RoundingMode.stochastic(key, 0, cfg["rounds"])
    elif cfg["rounding"] == "rtne":
        mode = nx.RTNE
    else:
        raise ConfigError(f"rounding must be 'rtne' or 'sr', got {cfg['rounding']!r}")
    rht = None
    src = x
    if cfg["rht"]:
        rht = bq.RhtConfig(cfg["rht_block"], key=key, stream=1, rounds=cfg["rounds"])
        src = bq.rht_apply(x, rht, axis=layout.axis if layout.kind == "1d" else 1)
    q = bq.quantize(src, layout, selection, mode)
    deq = q.dequantize()
    if rht is not None:
        deq = bq.rht_invert(deq, rht, axis=layout.axis if layout.kind == "1d" else 1)
    bq.save_microblock(q, os.path.join(out, "quantized.lbit"))
    write_tensor(deq, os.path.join(out, "dequantized.lbit"))
    err = deq - x.reshape(deq.shape)
    return {
        "shape": list(q.shape),
        "layout": layout.to_dict(),
        "selection": selection.to_dict(),
        "rounding": cfg["rounding"],
        "n_blocks": q.n_blocks,
        "ragged": q.ragged,
        "global_scale": q.global_scale,
        "zero_tensor": q.zero_tensor,
        "scale_saturations": q.scale_saturations,
        "underflow_rate": bq.underflow_rate(src, q),
        "mse": float(np.mean(err**2)) if err.size else 0.0,
        "max_abs_error": float(np.abs(err).max()) if err.size else 0.0,
        "rht": None if rht is None else rht.to_dict(),
    }


def cmd_underflow_sweep(cfg, seed, out):
    rows = ["ratio,instance,underflow_1d,underflow_2d\n"]
    per_ratio = []
    for r_i, ratio in enumerate(cfg["ratios"]):
        u1s, u2s = [], []
        for i in range(cfg["instances"]):
            x = bq.channel_suite(_rng(seed, "underflow-sweep", r_i, i), cfg["rows"], cfg["cols"], ratio, cfg["low_every"])
            u1, u2 = bq.layout_underflow(x, cfg["block_len"], tuple(cfg["tile"]))
            u1s.append(u1)
            u2s.append(u2)
            rows.append(f"{ratio!r},{i},{u1!r},{u2!r}\n")
        u1s, u2s = np.array(u1s), np.array(u2s)
        per_ratio.append({
            "ratio": float(ratio),
            "mean_underflow_1d": float(u1s.mean()),
            "mean_underflow_2d": float(u2s.mean()),
            "fraction_2d_higher": float(np.mean(u2s > u1s)),
        })
    _write_text(os.path.join(out, "underflow.csv"), "".join(rows))
    return {"instances": cfg["instances"], "per_ratio": per_ratio}


def _recipe(spec, seed) -> qt.PassRecipe:
    if spec == "default":
        return qt.default_recipe(seed)
    if spec == "exact":
        return qt.exact_recipe()
    if isinstance(spec, dict):
        return qt.PassRecipe.from_dict({"seed": seed, **spec})
    raise ConfigError(f"recipe must be 'default', 'exact' or an object, got {spec!r}")


def cmd_qtrain_step(cfg, seed, out):
    recipe = _recipe(cfg["recipe"], seed)
    rng = _rng(seed, "qtrain-step")
    n, di, dh, do = cfg["tokens"], cfg["d_in"], cfg["d_hidden"], cfg["d_out"]
    inputs = cfg["inputs"] or {}
    chain = None
    if cfg["mode"] == "step":
        x = read_tensor(inputs["x"]) if "x" in inputs else rng.standard_normal((n, di))
        w = read_tensor(inputs["w"]) if "w" in inputs else rng.standard_normal((do, di)) / np.sqrt(di)
        g = read_tensor(inputs["g_out"]) if "g_out" in inputs else rng.standard_normal((x.shape[0], w.shape[0]))
        k = int(round(cfg["low_channel_fraction"] * w.shape[0]))
        w[:k] *= cfg["low_channel_scale"]
        g[:, :k] *= cfg["low_channel_scale"]
        res = qt.linear_step(x, w, g, recipe, call=cfg["call"])
        ref = qt.linear_step(x, w, g, qt.exact_recipe())
        shapes = {"x": list(x.shape), "w": list(w.shape), "g_out": list(g.shape)}
        diag = res.diagnostics.to_record()
    elif cfg["mode"] == "chain":
        x = rng.standard_normal((n, di))
        w1 = rng.standard_normal((dh, di)) / np.sqrt(di)
        w2 = rng.standard_normal((do, dh)) / np.sqrt(dh)
        g = rng.standard_normal((n, do))
        k = int(round(cfg["low_channel_fraction"] * dh))
        low = np.arange(0, dh, max(1, dh // k))[:k] if k else np.array([], dtype=int)
        w1[low] *= cfg["low_channel_scale"]
        w2[:, low] *= cfg["low_channel_scale"]
        c = qt.two_layer_chain(x, w1, w2, g, recipe, call=cfg["call"])
        res = c.fc1
        ref = qt.two_layer_chain(x, w1, w2, g, qt.exact_recipe()).fc1
        shapes = {"x": list(x.shape), "w1": list(w1.shape), "w2": list(w2.shape), "g_out": list(g.shape)}
        diag = c.fc1.diagnostics.to_record()
        rec = c.to_record()
        chain = {"alignment": rec["alignment"], "fc2": rec["fc2"], "attribution": rec["attribution"]}
    else:
        raise ConfigError(f"mode must be 'step' or 'chain', got {cfg['mode']!r}")
    write_tensor(res.y, os.path.join(out, "y.lbit"))
    write_tensor(res.dx, os.path.join(out, "dx.lbit"))
    write_tensor(res.dw, os.path.join(out, "dw.lbit"))
    return {
        "mode": cfg["mode"],
        "recipe": recipe.to_dict(),
        "shapes": shapes,
        "diagnostics": diag,
        "chain": chain,
        "max_abs_error": {
            "y": float(np.abs(res.y - ref.y).max()),
            "dx": float(np.abs(res.dx - ref.dx).max()),
            "dw": float(np.abs(res.dw - ref.dw).max()),
        },
    }


def cmd_moe_cost(cfg, seed, out):
    base = moe.MoeConfig(cfg["d"], cfg["latent"], cfg["n_experts"], cfg["top_k"], cfg["m"],
                         cfg["shared_intermediate"], cfg["matrices_per_expert"])
    if base.is_latent:
        try:
            counterpart = {"config": base.standard_counterpart().to_dict(), "error": None}
        except ValueError as exc:
            counterpart = {"config": None, "error": str(exc)}
        std = None
    else:
        counterpart = {"config": None, "error": None}
        std = base
    base_cost = moe.cost_report(base)
    rows = ["alpha,latent,n_experts,top_k,routed_weight_elements_per_token,alltoall_elements_per_token,"
            "dense_latent_projection_flops_per_token,log10_combinations,nonlinear_budget\n"]
    variants = []
    for a in cfg["alphas"]:
        if std is None:
            break
        v = std if a == 1 else std.latent_variant(a)
        c = moe.cost_report(v)
        variants.append({
            "alpha": int(a),
            "config": v.to_dict(),
            "cost": c.to_dict(),
            "matches_base_loads": (c.routed_weight_elements_per_token == base_cost.routed_weight_elements_per_token
                                   and c.alltoall_elements_per_token == base_cost.alltoall_elements_per_token),
        })
        rows.append(f"{a},{v.latent},{v.n_experts},{v.top_k},{c.routed_weight_elements_per_token},"
                    f"{c.alltoall_elements_per_token},{c.dense_latent_projection_flops_per_token},"
                    f"{c.log10_combinations!r},{c.nonlinear_budget}\n")
    _write_text(os.path.join(out, "costs.csv"), "".join(rows))
    return {"base": {"config": base.to_dict(), "cost": base_cost.to_dict()}, "variants": variants,
            "counterpart": counterpart}


def cmd_autoquant_solve(cfg, seed, out):
    doc = cfg["problem"]
    if doc is None and cfg["problem_path"]:
        with open(cfg["problem_path"]) as fh:
            doc = json.load(fh)
    if doc is None:
        raise ConfigError("autoquant-solve needs 'problem' (inline) or 'problem_path'")
    problem = aq.AssignmentProblem.from_dict(doc)
    sol = aq.solve(problem)
    brute = None
    if cfg["verify"] and len(aq.decision_units(problem)) <= cfg["max_verify_units"]:
        brute = aq.brute_force(problem).total_sensitivity
    eff = None
    if problem.cost_unit == "bits":
        eff = aq.effective_bits(sol.assignment, {n.id: n.params for n in problem.nodes})
    _write_json(os.path.join(out, "assignment.json"), sol.to_dict())
    return {
        "cost_unit": problem.cost_unit,
        "budget": problem.budget,
        "assignment": dict(sorted(sol.assignment.items())),
        "units": dict(sorted(sol.unit_choices.items())),
        "total_sensitivity": sol.total_sensitivity,
        "total_cost": sol.total_cost,
        "effective_bits": eff,
        "brute_force_total_sensitivity": brute,
    }


def _ssm_spec(d, seed) -> ss.RecurrenceSpec:
    kind = d.get("kind")
    if kind == "accumulation":
        return ss.RecurrenceSpec.accumulation(int(d["T"]), float(d["c"]), float(d.get("h0", 0.0)),
                                              int(d.get("state_dim", 1)))
    if kind == "random":
        return ss.RecurrenceSpec.random(_rng(seed, "ssm-sim"), int(d["T"]), int(d["state_dim"]),
                                        d.get("input_dim"), tuple(d.get("decay", (0.5, 1.0))),
                                        float(d.get("input_scale", 1.0)))
    if kind == "files":
        return ss.load_spec(d["path"])
    raise ConfigError(f"spec.kind must be 'accumulation', 'random' or 'files', got {kind!r}")


def cmd_ssm_sim(cfg, seed, out):
    spec = _ssm_spec(cfg["spec"], seed)
    recipe = ss.CacheRecipe.from_dict(cfg["recipe"])
    trace = ss.simulate(spec, recipe, seed=seed)
    checks = np.unique(np.linspace(0, spec.T - 1, max(1, cfg["identity_checks"])).astype(int))
    worst = 0.0
    for t in checks:
        d = trace.deviation()[t]
        p = ss.predict_error(trace, spec, int(t))
        gap = float(np.abs(p - d).max())
        scale = float(np.abs(d).max())
        worst = max(worst, gap / scale if scale > 0 else (0.0 if gap == 0 else math.inf))
    stats = ss.drift_stats(spec, recipe, cfg["trials"], seed)
    _write_text(os.path.join(out, "drift.csv"), stats.to_csv())
    if cfg["write_trace"]:
        ss.save_trace(trace, os.path.join(out, "trace"))
    return {
        "recipe": recipe.to_dict(),
        "T": spec.T,
        "state_dim": spec.state_dim,
        "trials": stats.trials,
        "unstable_steps": spec.unstable_steps(),
        "max_abs_deviation": float(np.abs(trace.deviation()).max()),
        "identity_max_rel_error": worst,
        "final_mean_error": [float(v) for v in stats.mean[-1]],
        "final_std_error": [float(v) for v in stats.std[-1]],
    }


def _toy_lm(d, rng, other=None) -> sd.ToyLm:
    kind = d.get("kind")
    if kind == "random":
        return sd.ToyLm.random(rng, int(d["vocab"]), int(d.get("window", 1)), float(d.get("concentration", 1.0)))
    if kind == "uniform":
        return sd.ToyLm.uniform(int(d["vocab"]), int(d.get("window", 0)))
    if kind == "table":
        return sd.ToyLm.from_dict(d)
    if kind == "file":
        with open(d["path"]) as fh:
            return sd.ToyLm.from_json(fh.read())
    if kind == "mix" and other is not None:
        return other.mix_uniform(float(d["lam"]))
    if kind == "same" and other is not None:
        return other
    raise ConfigError(f"unsupported toy model kind {kind!r}")


def cmd_specdec_sim(cfg, seed, out):
    rng = _rng(seed, "specdec-sim")
    target = _toy_lm(cfg["target"], rng)
    drafter = _toy_lm(cfg["drafter"], rng, target)
    gen = sd.simulate_generation(target, drafter, cfg["draft_length"], cfg["steps"], cfg["mode"], rng)
    incl = cfg["include_verifier_token"]
    rates = sd.acceptance_by_index(gen.events) if cfg["steps"] else np.zeros(cfg["draft_length"])
    _write_json(os.path.join(out, "events.json"), gen.events.to_dict())
    _write_text(os.path.join(out, "rates.csv"), sd.rates_csv(rates))
    return {
        "mode": cfg["mode"],
        "draft_length": cfg["draft_length"],
        "steps": cfg["steps"],
        "convention": "accepted prefix + verifier token" if incl else "accepted prefix only",
        "acceptance_length": sd.acceptance_length(gen.events, incl) if cfg["steps"] else 0.0,
        "acceptance_by_index": [float(r) for r in rates],
        "tokens_emitted": len(gen.tokens),
    }


def cmd_merge(cfg, seed, out):
    if cfg["checkpoints"]:
        metas = [mg.CheckpointMeta(float(c["tokens"]), c["path"]) for c in cfg["checkpoints"]]
        load = lambda m: read_tensor(m.ref)  # noqa: E731
    else:
        r = cfg["random"]
        rng = _rng(seed, "merge")
        params = [rng.standard_normal(tuple(r["shape"])) for _ in range(int(r["count"]))]
        metas = [mg.CheckpointMeta(float(r["interval_tokens"]) * (i + 1), None) for i in range(int(r["count"]))]
        lookup = {m.token_count: p for m, p in zip(metas, params)}
        load = lambda m: lookup[m.token_count]  # noqa: E731
    schedule = mg.MergeSchedule(cfg["window_tokens"], cfg["scheme"], cfg["peak_lr"], cfg["min_lr"], cfg["horizon"])
    chosen = mg.select_window(metas, schedule.window_tokens)
    w = mg.coefficients(schedule, chosen)
    merged = mg.merge([load(m) for m in chosen], w)
    write_tensor(merged, os.path.join(out, "merged.lbit"))
    return {
        "schedule": schedule.to_dict(),
        "selected": [{"token_count": m.token_count, "ref": m.ref} for m in chosen],
        "coefficients": [float(v) for v in w],
        "parameters": int(np.asarray(merged).size),
    }


def cmd_codec_table(cfg, seed, out):
    fmt = nx.get_format(cfg["format"])
    rows = ["code,bits,value\n"] + [f"{c},{b},{v!r}\n" for c, b, v in nx.codec_table(fmt)]
    _write_text(os.path.join(out, "codec.csv"), "".join(rows))
    return {"format": fmt.name, "codes": len(rows) - 1, "max_value": fmt.max_value}


COMMANDS = {
    "quantize": cmd_quantize,
    "underflow-sweep": cmd_underflow_sweep,
    "qtrain-step": cmd_qtrain_step,
    "moe-cost": cmd_moe_cost,
    "autoquant-solve": cmd_autoquant_solve,
    "ssm-sim": cmd_ssm_sim,
    "specdec-sim": cmd_specdec_sim,
    "merge": cmd_merge,
    "codec-table": cmd_codec_table,
}


# --------------------------------------------------------------------------- #
# Driver
# --------------------------------------------------------------------------- #


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, subcommand, seed) -> dict:
    files = {}
    for root, _, names in os.walk(out):
        for name in names:
            full = os.path.join(root, name)
            rel = os.path.relpath(full, out).replace(os.sep, "/")
            if rel in ("manifest.json", "error.json"):
                continue
            files[rel] = _sha256(full)
    manifest = {"subcommand": subcommand, "seed": seed, "files": dict(sorted(files.items()))}
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return manifest


def run(subcommand: str, out, config_path=None, overrides=(), seed: int = 0) -> int:
    """Execute one subcommand into ``out``; return the process exit status."""
    os.makedirs(out, exist_ok=True)
    try:
        if subcommand not in COMMANDS:
            raise ConfigError(f"unknown subcommand {subcommand!r}")
        if not 0 <= seed < 1 << 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        cfg = resolve_config(subcommand, config_path, overrides)
        _write_json(os.path.join(out, "config.json"), {"subcommand": subcommand, "seed": seed, "config": cfg})
        report = {"subcommand": subcommand, "seed": seed, **COMMANDS[subcommand](cfg, seed, out)}
        validate_report(subcommand, report)
        _write_json(os.path.join(out, "report.json"), report)
        write_manifest(out, subcommand, seed)
    except (ValueError, KeyError, TypeError, OSError, FloatingPointError, jsonschema.ValidationError) as exc:
        # ConfigError, TensorFileError and model errors are ValueErrors
        record = {"subcommand": subcommand, "error": {"type": type(exc).__name__, "message": str(exc)}}
        jsonschema.validate(record, ERROR_SCHEMA)
        _write_json(os.path.join(out, "error.json"), record)
        print(f"lowbit {subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lowbit", description="Low-precision numerics workbench.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="run directory for reports and tensors")
        p.add_argument("--config", help="JSON file with the parameter block")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
        p.add_argument("--seed", type=int, default=0, help="64-bit seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.subcommand, args.out, args.config, args.set, args.seed)


if __name__ == "__main__":
    sys.exit(main())
