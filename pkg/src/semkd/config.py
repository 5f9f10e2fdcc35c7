"""Experiment configuration: TOML schema, validation, overrides, seed fan-out.

A run is fully described by one TOML file with ``[dataset]``, ``[model]``,
``[train]``, and ``[eval]`` sections plus a root ``seed``.  The resolved
config (defaults filled in, derived seeds recorded) is written next to every
run's outputs and is itself a valid config, so a run directory can always be
reproduced from its snapshot alone.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os

import tomli

from .errors import ConfigurationError, ParseError
from .evalsuite import EpisodeConfig
from .losses import LossConfig
from .model import ModelConfig
from .semantics import load_semantics
from .sessions import SyntheticStreamConfig, build_image_stream, build_synthetic_stream
from .trainer import DEFAULT_EPOCHS, TrainConfig, derive_seed

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs",
    "dataset": {
        "kind": "synthetic",
        "num_base_classes": 20,
        "num_sessions": 5,
        "way": 5,
        "shot": 5,
        "feature_dim": 16,
        "samples_per_base_class": 100,
        "test_per_class": 20,
        "blob_spread": 0.75,
        "num_clusters": 4,
        "cluster_scale": 6.0,
        "class_spread": 1.5,
        "semantic_noise": 0.05,
        "dfsl_pool_classes": 20,
        "samples_per_novel_class": 20,
        # image datasets additionally use: root, split_spec, semantics_file,
        # semantic_dim, image_size
        "image_size": 32,
    },
    "model": {
        "feature_dim": 32,
        "backbone_hidden": 64,
        "attention_hidden": 64,
        "mapping_hidden": [512, 728],
    },
    "train": {
        "learning_rate": 0.001,
        "batch_size": 128,
        "optimizer": "adam",
        "num_superclasses": 3,
        "grad_clip": 0.0,
        "epochs_per_phase": dict(DEFAULT_EPOCHS),
        "loss": {
            "lambda1": 0.7,
            "lambda2": 1.1,
            "lambda3": 0.6,
            "tau": 2.0,
            "attention_loss_form": "nll",
        },
    },
    "eval": {
        "protocol": "FSCIL",
        "episodes": 600,
        "episode_way": 5,
        "episode_shot": 5,
        "queries_per_class": 15,
        "base_queries": 75,
    },
}

SEED_NAMES = ("stream", "model-init", "phase-backbone", "kmeans", "phase-embeddings",
              "phase-base", "episodes")


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        try:
            raw = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    return _deep_merge(DEFAULT_CONFIG, raw)


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as TOML scalars."""
    out = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            value = raw
        node = out
        keys = dotted.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {dotted!r} crosses a non-table value")
        node[keys[-1]] = value
    return out


def _expect(problems, table, section, key, types, positive=False, non_negative=False):
    if key not in table:
        problems.append(f"{section}.{key}: missing")
        return None
    value = table[key]
    if isinstance(value, bool) or not isinstance(value, types):
        problems.append(f"{section}.{key}: expected {types}, got {type(value).__name__}")
        return None
    if positive and value <= 0:
        problems.append(f"{section}.{key}: must be positive, got {value}")
    if non_negative and value < 0:
        problems.append(f"{section}.{key}: must be non-negative, got {value}")
    return value


def validate_config(cfg: dict) -> list[str]:
    """Return a list of human-readable schema problems (empty = valid)."""
    problems: list[str] = []
    _expect(problems, cfg, "<root>", "seed", int)
    _expect(problems, cfg, "<root>", "output_dir", str)

    ds = cfg.get("dataset", {})
    kind = ds.get("kind")
    if kind not in ("synthetic", "image"):
        problems.append(f"dataset.kind: expected 'synthetic' or 'image', got {kind!r}")
    if kind == "synthetic":
        for key in ("num_base_classes", "num_sessions", "way", "shot", "feature_dim",
                    "samples_per_base_class", "test_per_class", "num_clusters"):
            _expect(problems, ds, "dataset", key, int, positive=True)
        for key in ("blob_spread", "semantic_noise", "class_spread", "cluster_scale"):
            _expect(problems, ds, "dataset", key, (int, float), non_negative=True)
    elif kind == "image":
        for key in ("root", "split_spec", "semantics_file"):
            value = _expect(problems, ds, "dataset", key, str)
            if value is not None and not os.path.exists(value):
                problems.append(f"dataset.{key}: path does not exist: {value}")
        for key in ("semantic_dim", "image_size", "way", "shot", "test_per_class"):
            _expect(problems, ds, "dataset", key, int, positive=True)

    md = cfg.get("model", {})
    for key in ("feature_dim", "backbone_hidden", "attention_hidden"):
        _expect(problems, md, "model", key, int, positive=True)
    hidden = md.get("mapping_hidden")
    if (not isinstance(hidden, list) or len(hidden) != 2
            or not all(isinstance(h, int) and h > 0 for h in hidden)):
        problems.append(f"model.mapping_hidden: expected two positive integers, got {hidden!r}")

    tr = cfg.get("train", {})
    _expect(problems, tr, "train", "learning_rate", (int, float), positive=True)
    _expect(problems, tr, "train", "batch_size", int, positive=True)
    _expect(problems, tr, "train", "num_superclasses", int, positive=True)
    _expect(problems, tr, "train", "grad_clip", (int, float), non_negative=True)
    if tr.get("optimizer") not in ("adam", "sgd"):
        problems.append(f"train.optimizer: expected 'adam' or 'sgd', got {tr.get('optimizer')!r}")
    epochs = tr.get("epochs_per_phase", {})
    if not isinstance(epochs, dict):
        problems.append("train.epochs_per_phase: expected a table")
    else:
        unknown = set(epochs) - set(DEFAULT_EPOCHS)
        if unknown:
            problems.append(f"train.epochs_per_phase: unknown phases {sorted(unknown)}")
        for key, value in epochs.items():
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                problems.append(f"train.epochs_per_phase.{key}: expected int >= 0, got {value!r}")
    loss = tr.get("loss", {})
    for key in ("lambda1", "lambda2", "lambda3"):
        _expect(problems, loss, "train.loss", key, (int, float), non_negative=True)
    _expect(problems, loss, "train.loss", "tau", (int, float), positive=True)
    if loss.get("attention_loss_form") not in ("nll", "raw"):
        problems.append(
            "train.loss.attention_loss_form: expected 'nll' or 'raw', "
            f"got {loss.get('attention_loss_form')!r}"
        )

    ev = cfg.get("eval", {})
    protocol = ev.get("protocol")
    if protocol not in ("FSCIL", "DFSL"):
        problems.append(f"eval.protocol: expected 'FSCIL' or 'DFSL', got {protocol!r}")
    for key in ("episodes", "episode_way", "episode_shot", "queries_per_class", "base_queries"):
        _expect(problems, ev, "eval", key, int, positive=True)
    if protocol == "DFSL" and kind == "synthetic" and ds.get("num_sessions") != 2:
        problems.append("dataset.num_sessions: DFSL streams have exactly 2 tasks")
    return problems


def resolve_config(cfg: dict) -> dict:
    """Fill defaults and record the seed fan-out used by the run."""
    resolved = _deep_merge(DEFAULT_CONFIG, cfg)
    root = resolved["seed"]
    seeds = {name: derive_seed(root, name) for name in SEED_NAMES}
    if resolved["eval"]["protocol"] == "FSCIL":
        for t in range(2, resolved["dataset"].get("num_sessions", 1) + 1):
            seeds[f"session-{t:03d}"] = derive_seed(root, f"session-{t:03d}")
    else:
        seeds["session-002"] = derive_seed(root, "session-002")
    resolved["derived_seeds"] = seeds
    return resolved


def config_digest(cfg: dict, *, ignore_seed: bool = False) -> str:
    data = {k: v for k, v in cfg.items() if k not in ("derived_seeds", "output_dir")}
    if ignore_seed:
        data = {k: v for k, v in data.items() if k != "seed"}
    blob = json.dumps(data, sort_keys=True).encode("utf-8")
    return hashlib.sha1(blob).hexdigest()[:12]


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise ConfigurationError(f"cannot serialize {type(value).__name__} to TOML")


def dumps_toml(data: dict) -> str:
    """Minimal TOML emitter for nested dicts of scalars and arrays."""

    def emit(table: dict, prefix: str, lines: list[str]) -> None:
        scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
        subtables = {k: v for k, v in table.items() if isinstance(v, dict)}
        if prefix and scalars:
            lines.append(f"[{prefix}]")
        for key, value in scalars.items():
            lines.append(f"{key} = {_toml_scalar(value)}")
        if scalars:
            lines.append("")
        for key, sub in subtables.items():
            emit(sub, f"{prefix}.{key}" if prefix else key, lines)

    lines: list[str] = []
    emit(data, "", lines)
    return "\n".join(lines).rstrip() + "\n"


def build_stream(cfg: dict):
    """Construct the session stream described by the dataset section."""
    ds = cfg["dataset"]
    stream_seed = cfg.get("derived_seeds", {}).get("stream", derive_seed(cfg["seed"], "stream"))
    if ds["kind"] == "synthetic":
        return build_synthetic_stream(
            SyntheticStreamConfig(
                num_base_classes=ds["num_base_classes"],
                num_sessions=ds["num_sessions"],
                way=ds["way"],
                shot=ds["shot"],
                feature_dim=ds["feature_dim"],
                samples_per_base_class=ds["samples_per_base_class"],
                test_per_class=ds["test_per_class"],
                blob_spread=ds["blob_spread"],
                seed=stream_seed,
                num_clusters=ds["num_clusters"],
                cluster_scale=ds["cluster_scale"],
                class_spread=ds["class_spread"],
                semantic_noise=ds["semantic_noise"],
                protocol=cfg["eval"]["protocol"],
                dfsl_pool_classes=ds["dfsl_pool_classes"],
                samples_per_novel_class=ds["samples_per_novel_class"],
            )
        )
    semantics = load_semantics(ds["semantics_file"], ds["semantic_dim"])
    return build_image_stream(
        ds["root"], ds["split_spec"], ds["way"], ds["shot"], stream_seed,
        semantics=semantics, image_size=ds["image_size"], test_per_class=ds["test_per_class"],
    )


def build_train_config(cfg: dict) -> TrainConfig:
    tr = cfg["train"]
    loss = tr["loss"]
    return TrainConfig(
        epochs_per_phase=dict(tr["epochs_per_phase"]),
        learning_rate=float(tr["learning_rate"]),
        batch_size=tr["batch_size"],
        optimizer=tr["optimizer"],
        loss_cfg=LossConfig(
            lambda1=float(loss["lambda1"]),
            lambda2=float(loss["lambda2"]),
            lambda3=float(loss["lambda3"]),
            tau=float(loss["tau"]),
            attention_loss_form=loss["attention_loss_form"],
        ),
        num_superclasses=tr["num_superclasses"],
        seed=cfg["seed"],
        grad_clip=float(tr["grad_clip"]),
    )


def build_model_config(cfg: dict) -> ModelConfig:
    ds, md = cfg["dataset"], cfg["model"]
    if ds["kind"] == "synthetic":
        backbone, input_dim, channels = "mlp", ds["feature_dim"], 3
    else:
        backbone, input_dim, channels = "cnn", 1, 3
    return ModelConfig(
        backbone=backbone,
        input_dim=input_dim,
        image_channels=channels,
        backbone_hidden=md["backbone_hidden"],
        feature_dim=md["feature_dim"],
        semantic_dim=ds.get("semantic_dim", ds.get("feature_dim", 16)),
        num_embeddings=cfg["train"]["num_superclasses"],
        attention_hidden=md["attention_hidden"],
        mapping_hidden=tuple(md["mapping_hidden"]),
    )


def build_episode_config(cfg: dict) -> EpisodeConfig:
    ev = cfg["eval"]
    return EpisodeConfig(
        way=ev["episode_way"],
        shot=ev["episode_shot"],
        queries_per_class=ev["queries_per_class"],
        base_queries=ev["base_queries"],
        episodes=ev["episodes"],
        seed=cfg.get("derived_seeds", {}).get("episodes", derive_seed(cfg["seed"], "episodes")),
    )
