"""Run configuration: JSON loading, validation, and path resolution.

All randomness in a run is controlled by seeds recorded in the config, so
a config file plus the library version pins the outputs exactly. Relative
paths inside the config resolve against the effective output directory,
which lets one config drive several independent run directories.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

from .laplace import HyperGrid


class ConfigError(ValueError):
    """The run configuration is missing fields or violates invariants."""


@dataclass(frozen=True)
class StreamFiles:
    train_features: str
    train_labels: str
    test_features: str | None = None
    test_labels: str | None = None


@dataclass(frozen=True)
class SynthStreamConfig:
    name: str
    dim: int
    noise: float


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int
    per_class_train: int
    per_class_test: int
    streams: tuple
    latent_dim: int | None
    separation: float
    seed: int


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: str
    streams: dict
    partition_k: int
    partition_per_class: int
    partition_seed: int
    grid: HyperGrid
    jitter: float | None
    predict_samples: int
    predict_seed: int
    tree: str | None
    num_classes: int | None
    synth: SynthConfig | None
    raw: dict = field(repr=False, compare=False, default_factory=dict)

    def resolve(self, path):
        """Resolve a config-relative path against the output directory."""
        if os.path.isabs(path):
            return path
        return os.path.join(self.output_dir, path)


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def _get_int(obj, key, default=None, minimum=None, where="config"):
    value = obj.get(key, default)
    if value is None:
        raise ConfigError(f"{where}: missing required integer field {key!r}")
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{where}: field {key!r} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where}: field {key!r} must be >= {minimum}, got {value}")
    return value


def _parse_grid(obj):
    if obj is None:
        return HyperGrid.default()
    if not isinstance(obj, dict):
        raise ConfigError("grid must be an object")
    ls = obj.get("length_scales")
    sv = obj.get("signal_variances")
    for name, vals in (("length_scales", ls), ("signal_variances", sv)):
        _require(isinstance(vals, list) and vals, f"grid.{name} must be a non-empty list")
        _require(
            all(isinstance(v, (int, float)) and v > 0 for v in vals),
            f"grid.{name} entries must be positive numbers",
        )
    return HyperGrid(
        length_scales=tuple(float(v) for v in ls),
        signal_variances=tuple(float(v) for v in sv),
    )


def _parse_synth(obj):
    if obj is None:
        return None
    where = "synth"
    num_classes = _get_int(obj, "num_classes", minimum=2, where=where)
    per_class_train = _get_int(obj, "per_class_train", minimum=1, where=where)
    per_class_test = _get_int(obj, "per_class_test", minimum=1, where=where)
    seed = _get_int(obj, "seed", default=0, minimum=0, where=where)
    raw_streams = obj.get("streams")
    _require(isinstance(raw_streams, list) and raw_streams, "synth.streams must be a non-empty list")
    streams = []
    for i, s in enumerate(raw_streams):
        _require(isinstance(s, dict), f"synth.streams[{i}] must be an object")
        name = s.get("name")
        _require(isinstance(name, str) and name, f"synth.streams[{i}].name must be a non-empty string")
        dim = _get_int(s, "dim", minimum=1, where=f"synth.streams[{i}]")
        noise = s.get("noise", 1.0)
        _require(
            isinstance(noise, (int, float)) and noise >= 0,
            f"synth.streams[{i}].noise must be a number >= 0",
        )
        streams.append(SynthStreamConfig(name=name, dim=dim, noise=float(noise)))
    names = [s.name for s in streams]
    _require(len(set(names)) == len(names), "synth stream names must be distinct")
    latent_dim = obj.get("latent_dim")
    if latent_dim is not None:
        latent_dim = _get_int(obj, "latent_dim", minimum=1, where=where)
    separation = obj.get("separation", 3.0)
    _require(
        isinstance(separation, (int, float)) and separation > 0,
        "synth.separation must be a positive number",
    )
    return SynthConfig(
        num_classes=num_classes,
        per_class_train=per_class_train,
        per_class_test=per_class_test,
        streams=tuple(streams),
        latent_dim=latent_dim,
        separation=float(separation),
        seed=seed,
    )


def _parse_streams(obj):
    _require(isinstance(obj, dict) and obj, "streams must be a non-empty object")
    out = {}
    for name, entry in obj.items():
        _require(isinstance(entry, dict), f"streams.{name} must be an object")
        tf = entry.get("train_features")
        tl = entry.get("train_labels")
        _require(
            isinstance(tf, str) and isinstance(tl, str),
            f"streams.{name} needs string train_features and train_labels",
        )
        xf = entry.get("test_features")
        xl = entry.get("test_labels")
        for k, v in (("test_features", xf), ("test_labels", xl)):
            _require(v is None or isinstance(v, str), f"streams.{name}.{k} must be a string")
        out[name] = StreamFiles(
            train_features=tf, train_labels=tl, test_features=xf, test_labels=xl
        )
    for attr in ("train_features", "test_features"):
        paths = [getattr(s, attr) for s in out.values() if getattr(s, attr)]
        _require(
            len(set(paths)) == len(paths),
            f"streams must not share {attr} paths: {sorted(paths)}",
        )
    return out


def load_config(path, out_override=None, seed_override=None):
    """Load and validate a run config; CLI overrides are applied here."""
    try:
        with open(str(path)) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(raw, out_override=out_override, seed_override=seed_override)


def parse_config(raw, out_override=None, seed_override=None):
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    raw = dict(raw)
    if seed_override is not None:
        raw["seed"] = seed_override
    seed = _get_int(raw, "seed", default=0, minimum=0)

    output_dir = out_override or raw.get("output_dir")
    _require(
        isinstance(output_dir, str) and output_dir,
        "output directory required (config output_dir or --out)",
    )
    raw["output_dir"] = output_dir

    streams = _parse_streams(raw.get("streams")) if raw.get("streams") is not None else {}
    part = raw.get("partition") or {}
    _require(isinstance(part, dict), "partition must be an object")
    partition_k = _get_int(part, "k", default=1, minimum=1, where="partition")
    partition_per_class = _get_int(part, "per_class", default=1, minimum=1, where="partition")
    partition_seed = _get_int(part, "seed", default=seed, minimum=0, where="partition")

    pred = raw.get("predict") or {}
    _require(isinstance(pred, dict), "predict must be an object")
    predict_samples = _get_int(pred, "samples", default=1000, minimum=1, where="predict")
    predict_seed = _get_int(pred, "seed", default=seed, minimum=0, where="predict")

    jitter = raw.get("jitter")
    if jitter is not None:
        _require(
            isinstance(jitter, (int, float)) and jitter >= 0,
            "jitter must be a number >= 0",
        )
        jitter = float(jitter)

    tree = raw.get("tree")
    _require(tree is None or isinstance(tree, str), "tree must be a string path")

    num_classes = raw.get("num_classes")
    if num_classes is not None:
        num_classes = _get_int(raw, "num_classes", minimum=2)

    synth = _parse_synth(raw.get("synth"))
    if synth is not None:
        stream_names = set(streams)
        synth_names = {s.name for s in synth.streams}
        _require(
            not streams or synth_names == stream_names,
            f"synth stream names {sorted(synth_names)} must match streams {sorted(stream_names)}",
        )

    return RunConfig(
        seed=seed,
        output_dir=output_dir,
        streams=streams,
        partition_k=partition_k,
        partition_per_class=partition_per_class,
        partition_seed=partition_seed,
        grid=_parse_grid(raw.get("grid")),
        jitter=jitter,
        predict_samples=predict_samples,
        predict_seed=predict_seed,
        tree=tree,
        num_classes=num_classes,
        synth=synth,
        raw=raw,
    )


def config_hash(config):
    """Stable hash of the effective configuration for report traceability."""
    canon = json.dumps(config.raw, sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(canon.encode()).hexdigest()
