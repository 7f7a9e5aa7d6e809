"""Run configuration: JSON schema, validation, and defaults.

A run config is a JSON document with three sections mirroring the library's
config objects plus the evaluation protocol:

    {
      "generator": { ... GeneratorConfig fields ... },
      "model":     { ... ModelConfig fields except m (derived) ... },
      "eval":      { "protocol": ..., "sample_epochs": ..., "seed": ...,
                     "eer_factor": ... }
    }

Unknown or out-of-range keys are rejected before any computation, naming the
offending key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

from .errors import ConfigError, ParseError
from .model import ModelConfig
from .synthdata import GeneratorConfig

# spec'd hyperparameter defaults for the desk-scale sprite analog
DEFAULT_MODEL = {
    "k": 40, "k_s": 8, "eps": 0.5,
    "lambda_rec": 15.0, "lambda_pred": 1.0, "lambda_eig": 1.0,
    "lr": 1e-3,
}


@dataclass
class EvalConfig:
    protocol: str = "fix-dynamic-sample-static"
    sample_epochs: int = 300
    seed: int = 0
    eer_factor: str | None = None

    def __post_init__(self):
        if self.protocol not in ("fix-dynamic-sample-static", "fix-static-sample-dynamic"):
            raise ConfigError(f"eval.protocol: unknown protocol {self.protocol!r}")
        if self.sample_epochs < 1:
            raise ConfigError("eval.sample_epochs must be >= 1")


@dataclass
class RunConfig:
    generator: GeneratorConfig
    model: ModelConfig
    eval: EvalConfig


_NUMBER = (int, float)
_SECTION_TYPES = {
    "generator": {
        "dataset": str, "t": int, "seed": int, "noise": _NUMBER,
        "n_train": int, "n_test": int, "grid": int, "colors": int, "sizes": int,
        "motions": int, "holdout_combos": bool, "speakers": int, "contents": int,
        "obs_dim": int, "static_dim": int, "frequencies": list,
    },
    "model": {
        "k": int, "hidden": list, "nonlinearity": str, "k_s": int, "eps": _NUMBER,
        "mode": str, "selection": str, "lambda_rec": _NUMBER, "lambda_pred": _NUMBER,
        "lambda_eig": _NUMBER, "noise_scale": _NUMBER,
        "lr": _NUMBER, "epochs": int,
        "batch_size": int, "seed": int, "eig_terms": str,
    },
    "eval": {
        "protocol": str, "sample_epochs": int, "seed": int, "eer_factor": str,
    },
}


def _check_section(name: str, given: dict) -> dict:
    allowed = _SECTION_TYPES[name]
    for key, value in given.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {name}.{key}")
        want = allowed[key]
        if want is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif want is bool:
            ok = isinstance(value, bool)
        elif want is _NUMBER:
            ok = isinstance(value, _NUMBER) and not isinstance(value, bool)
        else:
            ok = isinstance(value, want)
        if not ok:
            raise ConfigError(f"bad type for key {name}.{key}: expected {want}, "
                              f"got {type(value).__name__}")
    return given


def derived_m(gen: GeneratorConfig) -> int:
    if gen.dataset == "toy-sprites":
        return 3 * gen.grid * gen.grid
    if gen.dataset == "oscillators":
        return gen.obs_dim
    raise ConfigError(f"unknown dataset {gen.dataset!r}")


def build_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    for key in doc:
        if key not in _SECTION_TYPES:
            raise ConfigError(f"unknown key {key}")
    gen_doc = _check_section("generator", doc.get("generator", {}))
    model_doc = _check_section("model", doc.get("model", {}))
    eval_doc = _check_section("eval", doc.get("eval", {}))

    if "frequencies" in gen_doc:
        gen_doc = dict(gen_doc, frequencies=tuple(gen_doc["frequencies"]))
    generator = GeneratorConfig(**gen_doc)

    merged = dict(DEFAULT_MODEL)
    merged.update(model_doc)
    if "hidden" in merged:
        merged["hidden"] = tuple(int(h) for h in merged["hidden"])
    output_range = "unit" if generator.dataset == "toy-sprites" else "unbounded"
    model_cfg = ModelConfig(m=derived_m(generator), output_range=output_range, **merged)

    eval_cfg = EvalConfig(**eval_doc)
    if eval_cfg.eer_factor is None:
        eval_cfg.eer_factor = "speaker" if generator.dataset == "oscillators" else "color"
    return RunConfig(generator=generator, model=model_cfg, eval=eval_cfg)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ParseError(f"run config is not valid JSON: {e}") from e
    return build_run_config(doc)


def model_config_to_meta(cfg: ModelConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def model_config_from_meta(meta: dict) -> ModelConfig:
    meta = dict(meta)
    if "hidden" in meta:
        meta["hidden"] = tuple(meta["hidden"])
    return ModelConfig(**meta)


def generator_config_to_meta(cfg: GeneratorConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def generator_config_from_meta(meta: dict) -> GeneratorConfig:
    meta = dict(meta)
    if meta.get("frequencies") is not None:
        meta["frequencies"] = tuple(meta["frequencies"])
    return GeneratorConfig(**meta)
