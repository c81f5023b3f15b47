"""Batch runner: ``aclab run --config run.json [--out DIR] [--threads N] [--seed S]``.

A config is one JSON document with a ``command`` (simulate, sweep,
verify-lemma or baselines) and the blocks that command reads. Exit status is
0 on success, 2 for a bad config and 3 when a simulation aborts numerically.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import jsonschema

from .errors import AclabError, ConfigError, DomainError, HypothesisError, SchemaError
from .experiments import (LEMMA_IDS, LemmaTrialSpec, McConfig, estimate_lemma_bkpl,
                          estimate_lemma_nhl, make_b_grid, regret_sweep, worst_case_regret)
from .noise import NoiseSource
from .sde_engine import ProblemDynamics, simulate_controlled_path, write_trajectory_csv
from .strategy_kit import StrategySpec

log = logging.getLogger("aclab")

COMMANDS = ("simulate", "sweep", "verify-lemma", "baselines")
REGRET_HEADER = ["a", "b", "strategy", "mean_cost", "stderr", "ecost_opt", "mreg",
                 "mreg_stderr", "flags"]
LEMMA_HEADER = ["lemma", "param_json", "estimate", "stderr", "n"]
BASELINES = ({"kind": "br"}, {"kind": "cg", "alpha": 0.0}, {"kind": "cg", "alpha": 1.0},
             {"kind": "cg", "alpha": -1.0}, {"kind": "opt"})

_NUM = {"type": "number"}
_NUM_OR_NULL = {"type": ["number", "null"]}
_NUM_LIST = {"type": "array", "items": _NUM, "minItems": 1}

_STRATEGY = {
    "type": "object",
    "required": ["kind"],
    "properties": {"kind": {"enum": ["cg", "opt", "br"]}, "alpha": _NUM, "beta": _NUM_OR_NULL,
                   "A": _NUM_OR_NULL, "K": _NUM_OR_NULL, "tau": _NUM_OR_NULL},
    "additionalProperties": False,
}

_B_GRID = {
    "type": "object",
    "properties": {
        "log_min": _NUM, "log_max": _NUM, "points": {"type": "integer", "minimum": 1},
        "include_zero": {"type": "boolean"},
        "signs": {"type": "array", "items": {"enum": [1, -1]}, "minItems": 1},
        "value": _NUM, "values": _NUM_LIST,
    },
    "additionalProperties": False,
}

_LEMMA = {
    "type": "object",
    "required": ["lemma"],
    "properties": {
        "lemma": {"enum": list(LEMMA_IDS)}, "Q0": _NUM, "alpha": _NUM, "beta": _NUM,
        "beta_ladder": _NUM_LIST, "tau": _NUM_OR_NULL, "eta": _NUM_OR_NULL, "T_hat": _NUM,
        "steps": {"type": ["integer", "null"], "minimum": 2},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["command"],
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "dynamics": {
            "type": "object",
            "properties": {
                "a": {"oneOf": [_NUM, _NUM_LIST]}, "a_list": _NUM_LIST,
                "b": {"oneOf": [_NUM, _NUM_LIST]}, "b_grid": _B_GRID,
                "T": {"type": "number", "exclusiveMinimum": 0}, "q0": _NUM,
            },
            "additionalProperties": False,
        },
        "strategy": _STRATEGY,
        "strategies": {"type": "array", "items": _STRATEGY, "minItems": 1},
        "mc": {
            "type": "object",
            "properties": {
                "n_paths": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
                "dt_base": _NUM_OR_NULL, "dt_testing": _NUM_OR_NULL,
                "cost_rule": {"enum": ["left", "expected"]},
                "antithetic": {"type": "boolean"},
                "workers": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "output": {
            "type": "object",
            "properties": {
                "directory": {"type": "string", "minLength": 1},
                "formats": {"type": "array", "items": {"enum": ["csv", "json"]}, "minItems": 1,
                            "uniqueItems": True},
            },
            "additionalProperties": False,
        },
        "lemma": _LEMMA,
        "lemmas": {"type": "array", "items": _LEMMA, "minItems": 1},
    },
    "additionalProperties": False,
}


# ---------------------------------------------------------------------------
# config normalization

def _floats(v):
    return [float(x) for x in (v if isinstance(v, list) else [v])]


def _b_values(dyn: dict) -> list[float]:
    if "b" in dyn and "b_grid" in dyn:
        raise ConfigError("dynamics: give either b or b_grid, not both")
    if "b_grid" not in dyn:
        return _floats(dyn.get("b", 0.0))
    g = dyn["b_grid"]
    if "values" in g or "value" in g:
        extra = set(g) - {"values", "value", "points"}
        if extra or ("values" in g and "value" in g):
            raise ConfigError(f"b_grid: explicit values cannot be mixed with {sorted(extra)}")
        vals = g["values"] if "values" in g else [g["value"]]
        if "points" in g and g["points"] != len(vals):
            raise ConfigError(f"b_grid: points={g['points']} but {len(vals)} values given")
        return _floats(vals)
    missing = {"log_min", "log_max", "points"} - set(g)
    if missing:
        raise ConfigError(f"b_grid: missing {sorted(missing)}")
    return make_b_grid(g["log_min"], g["log_max"], g["points"], g.get("include_zero", True),
                       tuple(g.get("signs", (1, -1))))


def _strategy(doc: dict) -> dict:
    kind = doc["kind"]
    if kind == "cg":
        if "alpha" not in doc or set(doc) - {"kind", "alpha"}:
            raise ConfigError(f"cg strategy takes exactly one field 'alpha', got {sorted(doc)}")
        return {"kind": "cg", "alpha": float(doc["alpha"])}
    if kind == "opt":
        if set(doc) - {"kind", "beta"}:
            raise ConfigError(f"opt strategy takes only 'beta', got {sorted(doc)}")
        beta = doc.get("beta")
        return {"kind": "opt", "beta": None if beta is None else float(beta)}
    if set(doc) - {"kind", "A", "K", "tau"}:
        raise ConfigError(f"br strategy takes only A, K, tau, got {sorted(doc)}")
    return {"kind": "br", **{k: None if doc.get(k) is None else float(doc[k]) for k in ("A", "K", "tau")}}


def _lemmas(cfg: dict) -> list[dict]:
    if "lemma" in cfg and "lemmas" in cfg:
        raise ConfigError("give either lemma or lemmas, not both")
    raw = cfg.get("lemmas") or ([cfg["lemma"]] if "lemma" in cfg else [])
    out = []
    for doc in raw:
        if "beta" in doc and "beta_ladder" in doc:
            raise ConfigError("lemma: give either beta or beta_ladder, not both")
        betas = doc.get("beta_ladder", [doc.get("beta", 0.0)])
        for beta in betas:
            item = {
                "lemma": doc["lemma"],
                "Q0": float(doc.get("Q0", 1.0)),
                "alpha": float(doc.get("alpha", 1.0)),
                "beta": float(beta),
                "tau": None if doc.get("tau") is None else float(doc["tau"]),
                "eta": None if doc.get("eta") is None else float(doc["eta"]),
                "T_hat": float(doc.get("T_hat", 1.0)),
                "steps": doc.get("steps"),
            }
            out.append(item)
    return out


def normalize_config(raw: dict) -> dict:
    """Validate a raw config and fill every default; the result is a fixed point."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    cmd = raw["command"]
    dyn = raw.get("dynamics", {})
    if "a" in dyn and "a_list" in dyn:
        raise ConfigError("dynamics: give either a or a_list, not both")
    a_vals = _floats(dyn.get("a_list", dyn.get("a", 0.0)))
    b_vals = _b_values(dyn)
    T = float(dyn.get("T", 1.0))
    q0 = float(dyn.get("q0", 1.0))
    for name, vals in (("a", a_vals), ("b", b_vals), ("T", [T]), ("q0", [q0])):
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError(f"dynamics.{name} must be finite")

    if "strategy" in raw and "strategies" in raw:
        raise ConfigError("give either strategy or strategies, not both")
    strategies = [_strategy(s) for s in raw.get("strategies", [raw["strategy"]] if "strategy" in raw else [])]
    if cmd == "baselines":
        if strategies:
            raise ConfigError("baselines uses a fixed strategy set; remove strategy/strategies")
    elif cmd in ("simulate", "sweep") and not strategies:
        raise ConfigError(f"{cmd} needs a strategy")

    mc_raw = raw.get("mc", {})
    mc = {
        "n_paths": int(mc_raw.get("n_paths", 1 if cmd == "simulate" else 100_000)),
        "seed": int(mc_raw.get("seed", 42)),
        "dt_base": None if mc_raw.get("dt_base") is None else float(mc_raw["dt_base"]),
        "dt_testing": None if mc_raw.get("dt_testing") is None else float(mc_raw["dt_testing"]),
        "cost_rule": mc_raw.get("cost_rule", "left" if cmd == "simulate" else "expected"),
        "antithetic": bool(mc_raw.get("antithetic", False)),
        "workers": int(mc_raw.get("workers", 1)),
    }
    out_raw = raw.get("output", {})
    output = {"directory": out_raw.get("directory", "out"),
              "formats": list(out_raw.get("formats", ["csv", "json"]))}

    lemmas = _lemmas(raw)
    if cmd == "verify-lemma" and not lemmas:
        raise ConfigError("verify-lemma needs a lemma block")
    if cmd != "verify-lemma" and lemmas:
        raise ConfigError(f"lemma blocks are only read by verify-lemma, not {cmd}")
    if cmd == "simulate" and (len(a_vals) != 1 or len(b_vals) != 1 or len(strategies) != 1):
        raise ConfigError("simulate needs exactly one a, one b and one strategy")

    norm = {"command": cmd, "dynamics": {"a": a_vals, "b": b_vals, "T": T, "q0": q0},
            "mc": mc, "output": output}
    if strategies:
        norm["strategies"] = strategies
    if lemmas:
        norm["lemmas"] = lemmas
    return norm


def dump_config(norm: dict) -> str:
    return json.dumps(norm, sort_keys=True, indent=2)


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return normalize_config(raw)


# ---------------------------------------------------------------------------
# output

def _f(x) -> str:
    return format(float(x), ".17g")


def _json_text(obj, indent=0) -> str:
    """JSON with every float written to 17 significant digits."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        if math.isnan(obj):
            return "NaN"
        if math.isinf(obj):
            return "Infinity" if obj > 0 else "-Infinity"
        return _f(obj)
    if isinstance(obj, (int, str)):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json_text(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + _json_text(v, indent + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path: Path, obj) -> None:
    path.write_text(_json_text(obj) + "\n")


def write_regret_csv(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REGRET_HEADER)
        for r in rows:
            w.writerow([_f(r.a), _f(r.b), r.strategy, _f(r.cost.mean), _f(r.cost.stderr),
                        _f(r.ecost_opt), _f(r.mreg), _f(r.mreg_stderr), ";".join(r.flags)])


def _stable_config(norm: dict) -> dict:
    """The config as echoed into outputs: thread count does not affect results."""
    out = copy.deepcopy(norm)
    out["mc"].pop("workers", None)
    out["output"].pop("directory", None)
    return out


# ---------------------------------------------------------------------------
# commands

def _mc(norm: dict) -> McConfig:
    m = norm["mc"]
    return McConfig(m["n_paths"], m["seed"], m["dt_base"], m["dt_testing"], m["cost_rule"],
                    m["antithetic"], m["workers"])


def _specs(docs) -> list[StrategySpec]:
    return [StrategySpec(**{k: v for k, v in d.items() if v is not None}) for d in docs]


def cmd_simulate(norm: dict, out: Path) -> None:
    d = norm["dynamics"]
    a, b, T, q0 = d["a"][0], d["b"][0], d["T"], d["q0"]
    spec = _specs(norm["strategies"])[0]
    bp = spec.build(a, b, T, q0)
    dyn = ProblemDynamics(a, b, q0, T)
    m = norm["mc"]
    mc_grid = McConfig(2, m["seed"], m["dt_base"], m["dt_testing"], m["cost_rule"])
    grid = mc_grid.grid(T, bp)
    paths = []
    for i in range(m["n_paths"]):
        traj = simulate_controlled_path(dyn, bp, grid, NoiseSource(m["seed"], i))
        if "csv" in norm["output"]["formats"]:
            write_trajectory_csv(traj, out / f"trajectory_{i:05d}.csv")
        paths.append({"path": i, "cost": traj.cost, "steps": len(traj.controls),
                      "events": [[e.t, e.tag] for e in traj.events]})
        log.info("path %d: cost=%.6g", i, traj.cost)
    if "json" in norm["output"]["formats"]:
        _write_json(out / "summary.json", {"config": _stable_config(norm),
                                           "strategy": bp.to_json(), "paths": paths})


def _sweep_rows(norm: dict, specs) -> list:
    d = norm["dynamics"]
    return regret_sweep(d["a"], d["b"], specs, _mc(norm), d["T"], d["q0"], log=log.info)


def _worst_rows(rows) -> list[dict]:
    out = []
    for a in dict.fromkeys(r.a for r in rows):
        for sid, m, b in worst_case_regret([r for r in rows if r.a == a]):
            out.append({"a": a, "strategy": sid, "max_mreg": m, "argmax_b": b})
    return out


def cmd_sweep(norm: dict, out: Path) -> None:
    rows = _sweep_rows(norm, _specs(norm["strategies"]))
    if "csv" in norm["output"]["formats"]:
        write_regret_csv(rows, out / "regret.csv")
    if "json" in norm["output"]["formats"]:
        _write_json(out / "summary.json", {"config": _stable_config(norm),
                                           "worst_case": _worst_rows(rows)})


def baseline_comparison(rows) -> list[dict]:
    """Per a: BR's worst regret against the worst of the best constant-gain baseline."""
    out = []
    cg_ids = ("cg(0)", "cg(1)", "cg(-1)")
    for a in dict.fromkeys(r.a for r in rows):
        at_a = [r for r in rows if r.a == a]
        br = [r for r in at_a if r.strategy == "br"]
        br_max = max((r.mreg for r in br), default=math.nan)
        best_cg = []
        for b in dict.fromkeys(r.b for r in at_a):
            cg = [r.mreg for r in at_a if r.b == b and r.strategy in cg_ids]
            if cg:
                best_cg.append(min(cg))
        cg_max = max(best_cg, default=math.nan)
        ratio = br_max / cg_max if cg_max and math.isfinite(cg_max) else 0.0
        out.append({"a": a, "br_max_mreg": br_max, "baseline_max_min_mreg": cg_max,
                    "ratio": ratio, "br_within_tenth": bool(br_max <= 0.1 * cg_max)})
    return out


def cmd_baselines(norm: dict, out: Path) -> None:
    rows = _sweep_rows(norm, _specs(BASELINES))
    if "csv" in norm["output"]["formats"]:
        write_regret_csv(rows, out / "regret.csv")
    if "json" in norm["output"]["formats"]:
        _write_json(out / "summary.json", {"config": _stable_config(norm),
                                           "worst_case": _worst_rows(rows),
                                           "comparison": baseline_comparison(rows)})


def lemma_specs(norm: dict) -> list[LemmaTrialSpec]:
    m = norm["mc"]
    mc = McConfig(m["n_paths"], m["seed"], antithetic=m["antithetic"])
    return [LemmaTrialSpec(l["lemma"], l["Q0"], l["alpha"], l["beta"], l["tau"], l["eta"],
                           l["T_hat"], mc, l["steps"]) for l in norm["lemmas"]]


def cmd_verify_lemma(norm: dict, out: Path) -> None:
    results = []
    for spec in lemma_specs(norm):
        if spec.lemma.startswith("bkpl"):
            stay, leave = estimate_lemma_bkpl(spec)
            p = stay if spec.lemma == "bkpl-A" else leave
        else:
            p = estimate_lemma_nhl(spec)
        results.append((spec, p))
        log.info("%s %s: %.6g +- %.3g", spec.lemma, spec.params_json(), p.value, p.stderr)
    if "csv" in norm["output"]["formats"]:
        with open(out / "lemma.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LEMMA_HEADER)
            for spec, p in results:
                w.writerow([spec.lemma, spec.params_json(), _f(p.value), _f(p.stderr), p.n])
    if "json" in norm["output"]["formats"]:
        _write_json(out / "summary.json", {
            "config": _stable_config(norm),
            "results": [{"lemma": s.lemma, "params": json.loads(s.params_json()),
                         "estimate": p.value, "stderr": p.stderr, "n": p.n} for s, p in results]})


_DISPATCH = {"simulate": cmd_simulate, "sweep": cmd_sweep, "verify-lemma": cmd_verify_lemma,
             "baselines": cmd_baselines}


def run(config_path, out_dir=None, threads=None, seed=None) -> int:
    """Execute one config; returns the process exit status."""
    norm = None
    try:
        norm = load_config(config_path)
        if seed is not None:
            norm["mc"]["seed"] = int(seed)
        if threads is None and os.environ.get("ACLAB_THREADS"):
            try:
                threads = int(os.environ["ACLAB_THREADS"])
            except ValueError:
                raise ConfigError(f"ACLAB_THREADS must be an integer, got "
                                  f"{os.environ['ACLAB_THREADS']!r}") from None
        if threads is not None:
            if threads < 1:
                raise ConfigError(f"thread count must be >= 1, got {threads}")
            norm["mc"]["workers"] = int(threads)
        if out_dir is not None:
            norm["output"]["directory"] = str(out_dir)
        out = Path(norm["output"]["directory"])
        out.mkdir(parents=True, exist_ok=True)
        _DISPATCH[norm["command"]](norm, out)
    except (SchemaError, DomainError, HypothesisError) as exc:
        print(f"aclab: config error: {exc}", file=sys.stderr)
        return 2
    except AclabError as exc:
        replay = norm["mc"]["seed"] if norm else seed
        print(f"aclab: numeric abort (replay seed={replay}): {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"aclab: cannot write output: {exc}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aclab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="action", required=True)
    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("--config", required=True, help="path to the JSON config")
    p.add_argument("--out", help="output directory (overrides output.directory)")
    p.add_argument("--threads", type=int, help="worker threads (overrides ACLAB_THREADS and mc.workers)")
    p.add_argument("--seed", type=int, help="master seed (overrides mc.seed)")
    p.add_argument("-v", "--verbose", action="store_true", help="log one line per cell")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    return run(args.config, args.out, args.threads, args.seed)


if __name__ == "__main__":
    sys.exit(main())
