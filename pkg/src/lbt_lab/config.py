"""Experiment configuration: JSON schema, validation and resolution.

A config file is one JSON object. Every block is optional::

    {
      "train":     {...TrainConfig fields...},
      "seeds":     [0, 1, 2],
      "artifacts": {"n_samples": 500000, "kde": {"bounds": [[-2, 2], [-2, 2]], "counts": [160, 160]}},
      "contour":   {"low": -5, "high": 5, "step": 0.1, "starts": [[-3.5, -2.5]]},
      "check":     {"influence_instances": 20, "sensitivity": {"K": [1, 3, 5, 15]}}
    }

Unknown keys are rejected everywhere. Errors carry the file line of the
offending key so they can be reported as ``path:line: message``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field

import jsonschema

from .distributions import DATASETS
from .training import ALGORITHMS, ConfigError, TrainConfig

_num = {"type": "number"}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}
_widths = {"type": "array", "items": _pos_int, "minItems": 1}


def _obj(props: dict, **extra) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, **extra}


TRAIN_SCHEMA = _obj({
    "algorithm": {"enum": list(ALGORITHMS)},
    "dataset": {"enum": list(DATASETS)},
    "generator": _obj({
        "kind": {"enum": ["mlp", "mog"]},
        "hidden": _widths,
        "latent_dim": _pos_int,
        "init_means": {"type": ["array", "null"]},
        "init_jitter": {"type": "number", "minimum": 0},
        "std": {"type": "number", "exclusiveMinimum": 0},
    }),
    "estimator": _obj({
        "kind": {"enum": ["gaussian", "mog", "vae"]},
        "hidden": _widths,
        "latent_dim": _pos_int,
        "n_samples": _pos_int,
        "learn_std": {"type": "boolean"},
        "components": _pos_int,
        "init_scale": _num,
        "decoder_log_var_init": _num,
    }),
    "discriminator": _obj({"hidden": _widths, "steps": _pos_int}),
    "unroll": _obj({
        "K": _pos_int,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "optimizer": {"enum": ["sga", "adam"]},
        "population": {"type": "boolean"},
    }),
    "M": _pos_int,
    "lambda_g": {"type": "number", "minimum": 0},
    "lr_theta": {"type": "number", "exclusiveMinimum": 0},
    "lr_phi": {"type": "number", "exclusiveMinimum": 0},
    "lr_psi": {"type": "number", "exclusiveMinimum": 0},
    "estimator_optimizer": {"enum": ["adam", "sga"]},
    "gan_loss": {"enum": ["saturating", "non_saturating"]},
    "batch_size": _pos_int,
    "iterations": {"type": "integer", "minimum": 0},
    "seed": {"type": "integer", "minimum": 0},
    "eval_every": _pos_int,
    "eval_size": _pos_int,
    "metric_samples": {"type": "integer", "minimum": 0},
})

SCHEMA = _obj({
    "train": TRAIN_SCHEMA,
    "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
    "artifacts": _obj({
        "n_samples": {"type": "integer", "minimum": 1},
        "kde": _obj({
            "bounds": {"type": "array", "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}},
            "counts": {"type": "array", "items": _pos_int},
            "bandwidth": {"type": ["number", "array", "null"]},
        }),
    }),
    "contour": _obj({
        "low": _num, "high": _num, "step": {"type": "number", "exclusiveMinimum": 0},
        "starts": {"type": "array", "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "max_steps": _pos_int,
        "tol": {"type": "number", "exclusiveMinimum": 0},
    }),
    "check": _obj({
        "seed": {"type": "integer", "minimum": 0},
        "influence_instances": _pos_int,
        "stationarity_iterations": _pos_int,
        "sensitivity": _obj({
            "K": {"type": "array", "items": _pos_int, "minItems": 2},
            "M": {"type": "array", "items": _pos_int, "minItems": 2},
            "iterations": _pos_int,
            "hidden": _pos_int,
            "f_G_threshold": _num,
        }),
    }),
}, **{"$schema": "https://json-schema.org/draft/2020-12/schema", "title": "lbt_lab experiment config"})

# names used when a schema violation breaks a typed block's invariant
_BLOCK_NAMES = {"unroll": "UnrollConfig", "generator": "GeneratorConfig", "estimator": "EstimatorConfig",
                "discriminator": "DiscriminatorConfig", "train": "TrainConfig"}

ARTIFACT_DEFAULTS = {"n_samples": 500000, "kde": {"bounds": None, "counts": [160, 160], "bandwidth": None}}
CONTOUR_DEFAULTS = {"low": -5.0, "high": 5.0, "step": 0.1, "starts": [[-3.5, -2.5], [-3.0, 3.0]],
                    "lr": 1.0, "max_steps": 5000, "tol": 1e-9}
CHECK_DEFAULTS = {"seed": 0, "influence_instances": 20, "stationarity_iterations": 500,
                  "sensitivity": {"K": [1, 3, 5, 15], "M": [5, 10, 15, 50], "iterations": 300,
                                  "hidden": 32, "f_G_threshold": -2.0}}


class ConfigFileError(ConfigError):
    def __init__(self, source: str, line: int | None, message: str):
        self.source, self.line = source, line
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {message}")


def locate(text: str, path) -> int | None:
    """Best-effort line number of the key at ``path`` inside JSON ``text``.

    Keys are searched in order, each after the previous match, which is
    exact for the usual one-key-per-line layout.
    """
    pos = 0
    found = None
    for part in path:
        if isinstance(part, int):
            continue
        m = re.compile(r'"' + re.escape(str(part)) + r'"\s*:').search(text, pos)
        if m is None:
            break
        pos, found = m.end(), m.start()
    if found is None:
        return None
    return text.count("\n", 0, found) + 1


def _schema_message(err: jsonschema.ValidationError) -> str:
    path = [p for p in err.absolute_path]
    dotted = ".".join(str(p) for p in path) or "<root>"
    block = next((_BLOCK_NAMES[p] for p in reversed(path) if p in _BLOCK_NAMES), None)
    msg = err.message
    if err.validator == "additionalProperties":
        msg = f"unknown key(s): {msg}"
    if block is not None and err.validator in ("minimum", "exclusiveMinimum", "type", "enum"):
        return f"{dotted}: {block} invariant violated: {msg}"
    return f"{dotted}: {msg}"


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    """Raw blocks as given plus helpers that resolve defaults per command."""

    raw: dict = field(default_factory=dict)
    source: str = "<config>"

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigFileError(source, exc.lineno, f"invalid JSON: {exc.msg}") from None
        validator = jsonschema.Draft202012Validator(SCHEMA)
        errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
        if errors:
            err = errors[0]
            path = list(err.absolute_path)
            if err.validator == "additionalProperties" and isinstance(err.instance, dict):
                extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
                path += extra[:1]
            raise ConfigFileError(source, locate(text, path), _schema_message(err))
        cfg = cls(data, source)
        if "train" in data:
            try:
                cfg.train_config()
            except ConfigError as exc:
                line = locate(text, ["train"])
                raise ConfigFileError(source, line, f"train: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.parse(fh.read(), str(path))

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    def train_config(self, base: TrainConfig | None = None, seed: int | None = None) -> TrainConfig:
        d = (base or TrainConfig()).to_dict()
        d = _merge(d, self.raw.get("train", {}))
        if seed is not None:
            d["seed"] = int(seed)
        return TrainConfig.from_dict(d)

    def seeds(self, override=None) -> list[int]:
        if override:
            return list(override)
        if "seeds" in self.raw:
            return list(self.raw["seeds"])
        return [int(self.raw.get("train", {}).get("seed", 0))]

    def artifacts(self) -> dict:
        return _merge(ARTIFACT_DEFAULTS, self.raw.get("artifacts", {}))

    def contour(self) -> dict:
        return _merge(CONTOUR_DEFAULTS, self.raw.get("contour", {}))

    def check(self) -> dict:
        return _merge(CHECK_DEFAULTS, self.raw.get("check", {}))


def canonical_hash(obj) -> str:
    """SHA-256 of the canonical (sorted, compact) JSON encoding."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()
