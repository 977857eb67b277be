"""Run-config loading: JSON schema validation, defaults, and flag overrides."""
from __future__ import annotations

import copy
import json
from importlib import resources

import jsonschema

from .losses import LossWeights
from .trainer import TrainConfig


class ConfigError(ValueError):
    """A config problem located by a JSON pointer ("/data/oct_dir")."""

    def __init__(self, pointer, message):
        super().__init__(f"config error at {pointer or '/'}: {message}")
        self.pointer = pointer
        self.detail = message


def load_schema():
    return json.loads(resources.files("cyclegan3d").joinpath("config_schema.json").read_text())


def _pointer(parts):
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in parts)


def _locate(err):
    path = list(err.absolute_path)
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        return _pointer(path + missing[:1]), err.message
    if err.validator == "additionalProperties":
        known = err.schema.get("properties", {})
        extra = sorted(k for k in err.instance if k not in known)
        return _pointer(path + extra[:1]), f"unknown key {extra[0]!r}" if extra else err.message
    return _pointer(path), err.message


def validate(doc, schema=None):
    schema = schema or load_schema()
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(doc),
                    key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        raise ConfigError(*_locate(errors[0]))


def _fill(node, schema):
    if schema.get("type") != "object" or not isinstance(node, dict):
        return node
    for key, sub in schema.get("properties", {}).items():
        if key not in node:
            if "default" in sub:
                node[key] = copy.deepcopy(sub["default"])
            elif sub.get("type") == "object":
                node[key] = {}
        if key in node:
            node[key] = _fill(node[key], sub)
    return node


def resolve(doc):
    """Validate, fill every default, and run cross-field checks."""
    schema = load_schema()
    validate(doc, schema)
    out = _fill(copy.deepcopy(doc), schema)
    t = out["train"]
    if t["decay_start"] > t["epochs"]:
        raise ConfigError("/train/decay_start", f"{t['decay_start']} exceeds epochs {t['epochs']}")
    e = out["eval"]
    if e["embedder"] == "external" and not e["feature_csv"]:
        raise ConfigError("/eval/feature_csv", "required when embedder is 'external'")
    d = out["data"]
    if bool(d["eval_oct_dir"]) != bool(d["eval_confocal_dir"]):
        raise ConfigError("/data/eval_confocal_dir" if d["eval_oct_dir"] else "/data/eval_oct_dir",
                          "eval_oct_dir and eval_confocal_dir go together")
    return out


def set_pointer(doc, pointer, value):
    """Assign ``value`` at a JSON pointer, creating intermediate objects."""
    parts = [p.replace("~1", "/").replace("~0", "~") for p in pointer.strip("/").split("/")]
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(pointer, "cannot override inside a non-object")
    node[parts[-1]] = value
    return doc


def read_config(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    if not isinstance(doc, dict):
        raise ConfigError("", "top level must be an object")
    return doc


def train_config(resolved):
    """TrainConfig from a resolved run config."""
    t = dict(resolved["train"])
    t["weights"] = LossWeights(**t["weights"])
    t.update(resolved["model"])
    t["seed"] = resolved["seed"]
    try:
        return TrainConfig(**t)
    except ValueError as exc:
        raise ConfigError("/train", str(exc)) from None
