"""Experiment runner: density fits, BNN fits, bit ablations, and chopping.

Each run takes a declarative JSON config, writes a resolved copy with every
default materialized, and emits its artifacts (serialized posterior, JSONL
trace, metrics JSON, grid CSVs) into the output directory.  Reruns with the
same config and seed produce byte-identical metrics files.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import bnn
from .circuit import SmoothingSchedule
from .fixedpoint import FixedPointFormat
from .multivariate import JointTreeCircuit, MeanFieldPosterior, load_posterior
from .targets import grid_eval, make_target, target_names
from .train import (EarlyStopConfig, TrainConfig, TrainingError, TrainTrace,
                    TraceRecord, fit, reverse_kl)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "bitvi experiment config",
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["fit_density", "fit_bnn", "ablate_bits", "chop"]},
        "seed": {"type": "integer", "minimum": 0},
        "grid_resolution": {"type": "integer", "minimum": 2},
        "predictive_grid_resolution": {"type": "integer", "minimum": 2},
        "predictive_samples": {"type": "integer", "minimum": 1},
        "target": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"enum": list(target_names())},
                "params": {"type": "object"},
            },
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"enum": ["two_moons", "banana_clf"]},
                "params": {"type": "object"},
            },
        },
        "mlp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": {"type": "array", "items": {"type": "integer",
                                                      "minimum": 1},
                           "minItems": 2, "maxItems": 2},
                "layernorm": {"type": "boolean"},
                "ln_affine": {"type": "boolean"},
                "activation": {"enum": ["tanh", "relu"]},
            },
        },
        "posterior": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "family": {"enum": ["meanfield", "joint"]},
                "format": {"type": "string",
                           "pattern": "^[su][0-9]+i[0-9]+f$"},
                "alpha_rule": {"enum": ["quadratic", "exponential"]},
                "depth_offset": {"type": "integer"},
                "axis_order": {"type": ["array", "null"],
                               "items": {"type": "integer"}},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mc_samples": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number",
                                  "exclusiveMinimum": 0},
                "adam_beta1": {"type": "number"},
                "adam_beta2": {"type": "number"},
                "adam_eps": {"type": "number"},
                "max_steps": {"type": "integer", "minimum": 0},
                "smoothing_c": {"type": "number", "exclusiveMinimum": 0},
                "quantize": {"type": ["boolean", "null"]},
                "early_stop": {
                    "type": ["object", "null"],
                    "additionalProperties": False,
                    "properties": {
                        "patience": {"type": "integer", "minimum": 1},
                        "eval_every": {"type": "integer", "minimum": 1},
                        "mc_samples": {"type": "integer", "minimum": 1},
                    },
                },
            },
        },
        "ablate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bits": {"type": "array", "items": {"type": "integer",
                                                    "minimum": 1}},
                "sigmas": {"type": "array", "items": {"type": "number",
                                                      "exclusiveMinimum": 0}},
                "lr_decay_phases": {"type": "integer", "minimum": 1},
            },
        },
        "chop": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "artifact": {"type": "string"},
                "bits": {"type": "array", "items": {"type": "integer",
                                                    "minimum": 2}},
            },
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "grid_resolution": 200,
    "predictive_grid_resolution": 80,
    "predictive_samples": 512,
    "target": {"name": "gmm1d", "params": {}},
    "dataset": {"name": "two_moons", "params": {}},
    "mlp": {"hidden": [8, 8], "layernorm": True, "ln_affine": True,
            "activation": "tanh"},
    "posterior": {"family": "meanfield", "format": "s2i5f",
                  "alpha_rule": "quadratic", "depth_offset": 0,
                  "axis_order": None},
    "train": {"mc_samples": 64, "learning_rate": 0.001, "adam_beta1": 0.9,
              "adam_beta2": 0.999, "adam_eps": 1e-8, "max_steps": 2000,
              "smoothing_c": 0.1, "quantize": None, "early_stop": None},
    "ablate": {"bits": list(range(2, 15)),
               "sigmas": [0.1, 0.075, 0.05], "lr_decay_phases": 3},
    "chop": {"artifact": "", "bits": [10, 8, 6, 4, 2]},
}


def resolve_config(raw: dict, seed_override: int | None = None) -> dict:
    """Validate against the schema and materialize every default."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"config schema violation: {err.message}") from err
    cfg = {}
    for key, default in DEFAULTS.items():
        if isinstance(default, dict):
            cfg[key] = {**default, **raw.get(key, {})}
        else:
            cfg[key] = raw.get(key, default)
    cfg["kind"] = raw["kind"]
    if seed_override is not None:
        cfg["seed"] = seed_override
    if cfg["train"]["quantize"] is None:
        # Quantized training only makes sense when the target consumes the
        # representable values; density targets use the continuous output.
        cfg["train"]["quantize"] = cfg["kind"] in ("fit_bnn", "chop")
    if cfg["kind"] == "chop" and not cfg["chop"]["artifact"]:
        raise ConfigError("chop requires chop.artifact pointing at a "
                          "fit_bnn output directory")
    return cfg


def train_config(cfg: dict, threads: int) -> TrainConfig:
    t = cfg["train"]
    stop = t["early_stop"]
    return TrainConfig(
        mc_samples=t["mc_samples"], learning_rate=t["learning_rate"],
        adam_beta1=t["adam_beta1"], adam_beta2=t["adam_beta2"],
        adam_eps=t["adam_eps"], max_steps=t["max_steps"], seed=cfg["seed"],
        smoothing_c=t["smoothing_c"], quantize=t["quantize"],
        early_stop=EarlyStopConfig(**stop) if stop else None,
        threads=threads)


def smoothing_schedule(cfg: dict) -> SmoothingSchedule:
    return SmoothingSchedule(c=cfg["train"]["smoothing_c"],
                             alpha_rule=cfg["posterior"]["alpha_rule"],
                             depth_offset=cfg["posterior"]["depth_offset"])


def build_density_posterior(cfg: dict, dims: int):
    fmt = FixedPointFormat.from_string(cfg["posterior"]["format"])
    smoothing = smoothing_schedule(cfg)
    if cfg["posterior"]["family"] == "joint":
        return JointTreeCircuit.random([fmt] * dims, smoothing, cfg["seed"],
                                       cfg["posterior"]["axis_order"])
    return MeanFieldPosterior.random([fmt] * dims, smoothing, cfg["seed"])


# -- output helpers ----------------------------------------------------------


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _trace_writer(path: Path):
    fh = open(path, "w", encoding="utf-8")

    def sink(record: TraceRecord) -> None:
        fh.write(record.to_json() + "\n")

    return fh, sink


def write_density_grid(path: Path, log_density, dims: int, resolution: int,
                       domain) -> None:
    grid = grid_eval(log_density, dims, resolution, domain)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if dims == 1:
            (lo, hi), = domain
            step = (hi - lo) / resolution
            writer.writerow(["x", "density"])
            for i in range(resolution):
                writer.writerow([repr(lo + step * (i + 0.5)),
                                 repr(float(grid[i]))])
            return
        (lox, hix), (loy, hiy) = domain
        sx = (hix - lox) / resolution
        sy = (hiy - loy) / resolution
        writer.writerow(["x", "y", "density"])
        for i in range(resolution):
            for j in range(resolution):
                writer.writerow([repr(lox + sx * (i + 0.5)),
                                 repr(loy + sy * (j + 0.5)),
                                 repr(float(grid[i, j]))])


def write_predictive_grid(path: Path, posterior, spec, dataset,
                          resolution: int, n_samples: int,
                          rng: np.random.Generator) -> None:
    x = dataset.inputs
    lo = x.min(axis=0) - 0.5
    hi = x.max(axis=0) + 0.5
    ax = [lo[d] + (hi[d] - lo[d]) / resolution * (np.arange(resolution) + 0.5)
          for d in range(2)]
    gx, gy = np.meshgrid(ax[0], ax[1], indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    probs = bnn.predictive(posterior, spec, pts, n_samples, rng)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "p_class1"])
        for row, p in zip(pts, probs):
            writer.writerow([repr(float(row[0])), repr(float(row[1])),
                             repr(float(p))])


# -- commands --------------------------------------------------------------


def run_fit_density(cfg: dict, out: Path, threads: int) -> None:
    target = make_target(cfg["target"]["name"], cfg["target"]["params"])
    posterior = build_density_posterior(cfg, target.dims)
    tcfg = train_config(cfg, threads)
    fh, sink = _trace_writer(out / "trace.jsonl")
    try:
        posterior, trace = fit(posterior, target, tcfg, trace_sink=sink)
    finally:
        fh.close()
    entropy = posterior.entropy()
    kl = None
    if target.normalized:
        kl = reverse_kl(posterior, target, 100_000,
                        np.random.default_rng(
                            np.random.SeedSequence([cfg["seed"], 0xD1])))
    _write_json(out / "metrics.json", {
        "kind": "fit_density", "final_elbo": trace.final_elbo,
        "entropy": entropy, "reverse_kl": kl, "steps": len(trace)})
    _write_json(out / "posterior.json", posterior.to_json_dict())
    if target.dims <= 2:
        write_density_grid(out / "posterior_density.csv",
                           posterior.log_density, target.dims,
                           cfg["grid_resolution"], target.recommended_domain)
        write_density_grid(out / "target_density.csv", target.log_density,
                           target.dims, cfg["grid_resolution"],
                           target.recommended_domain)


def _mlp_spec(cfg: dict, in_dim: int) -> bnn.MlpSpec:
    m = cfg["mlp"]
    return bnn.MlpSpec(
        layer_sizes=(in_dim, m["hidden"][0], m["hidden"][1], 1),
        layernorm=m["layernorm"], ln_affine=m["ln_affine"],
        activation=m["activation"],
        weight_format=FixedPointFormat.from_string(
            cfg["posterior"]["format"]))


def run_fit_bnn(cfg: dict, out: Path, threads: int) -> None:
    dataset = bnn.make_dataset(cfg["dataset"]["name"],
                               cfg["dataset"]["params"], seed=cfg["seed"])
    spec = _mlp_spec(cfg, dataset.inputs.shape[1])
    schedule = bnn.BnnTargetSchedule(spec, dataset,
                                     batch_size=cfg["dataset"]["params"].get(
                                         "batch_size", 32),
                                     seed=cfg["seed"])
    posterior = bnn.make_posterior(spec, smoothing_schedule(cfg),
                                   seed=cfg["seed"])
    tcfg = train_config(cfg, threads)
    fh, sink = _trace_writer(out / "trace.jsonl")
    try:
        posterior, trace = fit(posterior, schedule, tcfg,
                               validation_target=schedule.validation_target,
                               trace_sink=sink)
    finally:
        fh.close()
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 0xB2]))
    xt, yt = dataset.subset("test")
    scores = bnn.metrics(
        bnn.predictive(posterior, spec, xt, cfg["predictive_samples"], rng),
        yt)
    _write_json(out / "metrics.json", {
        "kind": "fit_bnn", "final_elbo": trace.final_elbo,
        "entropy": posterior.entropy(), "steps": len(trace), **scores})
    _write_json(out / "posterior.json", posterior.to_json_dict())
    dataset.to_csv(out / "dataset.csv")
    write_predictive_grid(out / "predictive_grid.csv", posterior, spec,
                          dataset, cfg["predictive_grid_resolution"],
                          cfg["predictive_samples"],
                          np.random.default_rng(
                              np.random.SeedSequence([cfg["seed"], 0xB3])))


def fit_with_lr_decay(posterior, target, tcfg: TrainConfig,
                      phases: int) -> TrainTrace:
    """Chained fits with a decaying learning rate (factor 10 per phase).

    Ablation sweeps compare converged entropies at 1e-3 resolution, which
    needs the Adam stationary noise driven well below the plateau gaps.
    """
    merged = TrainTrace()
    steps = [tcfg.max_steps // phases] * phases
    steps[0] += tcfg.max_steps - sum(steps)
    offset = 0
    for phase, n in enumerate(steps):
        sub = dataclasses.replace(
            tcfg, learning_rate=tcfg.learning_rate * 10.0 ** (-phase),
            max_steps=n,
            seed=int(np.random.SeedSequence(
                [tcfg.seed, phase]).generate_state(1)[0]))
        posterior, trace = fit(posterior, target, sub)
        for rec in trace.records:
            merged.append(dataclasses.replace(rec, step=rec.step + offset))
        offset += len(trace.records)
    return merged


def run_ablate_bits(cfg: dict, out: Path, threads: int) -> None:
    rows = []
    for sigma in cfg["ablate"]["sigmas"]:
        target = make_target("equidistant_gmm",
                             {**cfg["target"]["params"], "sigma": sigma})
        for bits in cfg["ablate"]["bits"]:
            fmt = FixedPointFormat(False, 0, bits)
            posterior = MeanFieldPosterior.random(
                [fmt], smoothing_schedule(cfg), cfg["seed"])
            fit_with_lr_decay(posterior, target, train_config(cfg, threads),
                              cfg["ablate"]["lr_decay_phases"])
            rows.append({"sigma": sigma, "bits": bits,
                         "entropy": posterior.entropy()})
    with open(out / "entropy_vs_bits.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma", "bits", "entropy"])
        for row in rows:
            writer.writerow([repr(row["sigma"]), row["bits"],
                             repr(row["entropy"])])
    _write_json(out / "metrics.json", {"kind": "ablate_bits", "rows": rows})


def run_chop(cfg: dict, out: Path, threads: int) -> None:
    artifact = Path(cfg["chop"]["artifact"])
    source_cfg = json.loads(
        (artifact / "config.resolved.json").read_text(encoding="utf-8"))
    posterior = load_posterior(json.loads(
        (artifact / "posterior.json").read_text(encoding="utf-8")))
    dataset = bnn.make_dataset(source_cfg["dataset"]["name"],
                               source_cfg["dataset"]["params"],
                               seed=source_cfg["seed"])
    spec = _mlp_spec(source_cfg, dataset.inputs.shape[1])
    base_fmt = spec.weight_format
    xt, yt = dataset.subset("test")
    rows = []
    for bits in cfg["chop"]["bits"]:
        drop = base_fmt.total_bits - bits
        if drop < 0:
            raise ConfigError(f"cannot chop to {bits} bits: artifact has "
                              f"{base_fmt.total_bits}")
        chopped = (posterior if drop == 0
                   else posterior.truncate(base_fmt.frac_bits - drop))
        chopped_spec = dataclasses.replace(
            spec, weight_format=chopped.circuits[0].fmt)
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg["seed"], 0xC0, bits]))
        probs = bnn.predictive(chopped, chopped_spec, xt,
                               cfg["predictive_samples"], rng)
        rows.append({"bits": bits, **bnn.metrics(probs, yt)})
        write_predictive_grid(
            out / f"predictive_grid_{bits}bit.csv", chopped, chopped_spec,
            dataset, cfg["predictive_grid_resolution"],
            cfg["predictive_samples"],
            np.random.default_rng(
                np.random.SeedSequence([cfg["seed"], 0xC1, bits])))
    with open(out / "chop_metrics.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bits", "nlpd", "accuracy", "ece"])
        for row in rows:
            writer.writerow([row["bits"], repr(row["nlpd"]),
                             repr(row["accuracy"]), repr(row["ece"])])
    _write_json(out / "metrics.json", {"kind": "chop", "rows": rows})


_RUNNERS = {"fit_density": run_fit_density, "fit_bnn": run_fit_bnn,
            "ablate_bits": run_ablate_bits, "chop": run_chop}

_COMMAND_KINDS = {"fit": ("fit_density", "fit_bnn"),
                  "ablate-bits": ("ablate_bits",),
                  "chop": ("chop",)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitvi",
        description="circuit-over-bitstrings variational inference")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("fit", "ablate-bits", "chop"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
    sub.add_parser("config-schema",
                   help="print the JSON schema for experiment configs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "config-schema":
        print(json.dumps(CONFIG_SCHEMA, indent=2, sort_keys=True))
        return EXIT_OK
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("BITVI_THREADS", "1"))
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except OSError as err:
        print(f"bitvi: cannot read config: {err}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as err:
        print(f"bitvi: config is not valid JSON: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = resolve_config(raw, seed_override=args.seed)
        if cfg["kind"] not in _COMMAND_KINDS[args.command]:
            raise ConfigError(
                f"config kind {cfg['kind']!r} does not match command "
                f"{args.command!r}")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.resolved.json",
                    {**cfg, "threads": threads})
        _RUNNERS[cfg["kind"]](cfg, out, threads)
    except ConfigError as err:
        print(f"bitvi: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as err:
        print(f"bitvi: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"bitvi: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
