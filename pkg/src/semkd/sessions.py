"""Task streams: a large base task followed by disjoint few-shot sessions.

Streams come from two builders.  The synthetic builder draws Gaussian-blob
classes whose means live inside a handful of superclusters, and reuses the
(noised) class means as synthetic semantic vectors, so semantic proximity
mirrors visual proximity.  The image builder reads one folder per class plus
a JSON split spec.  A stream with ``protocol="DFSL"`` has exactly two tasks,
where the second is a pool of novel classes that episodes sample from.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DatasetError, ShapeError
from .semantics import SemanticTable, synthesize_semantics

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class Sample:
    x: np.ndarray  # feature vector, or HxWxC float image
    label: str
    task_index: int


@dataclass(frozen=True)
class TaskSpec:
    index: int
    classes: tuple[str, ...]
    train: tuple[Sample, ...]
    test: tuple[Sample, ...]
    way: int
    shot: int


@dataclass(frozen=True)
class SessionStream:
    tasks: tuple[TaskSpec, ...]
    semantics: SemanticTable
    protocol: str = "FSCIL"

    def __post_init__(self):
        if self.protocol not in ("FSCIL", "DFSL"):
            raise ConfigurationError(f"unknown protocol {self.protocol!r}")
        seen: set[str] = set()
        for pos, task in enumerate(self.tasks, start=1):
            if task.index != pos:
                raise ConfigurationError(
                    f"task indices must be consecutive from 1, got {task.index} at position {pos}"
                )
            overlap = seen.intersection(task.classes)
            if overlap:
                raise ConfigurationError(f"classes appear in more than one task: {sorted(overlap)}")
            seen.update(task.classes)
            missing = [c for c in task.classes if c not in self.semantics]
            if missing:
                raise ConfigurationError(f"classes without semantic vectors: {missing}")
            if self.protocol == "FSCIL" and task.index > 1:
                expected = task.way * task.shot
                if len(task.train) != expected:
                    raise ConfigurationError(
                        f"task {task.index} has {len(task.train)} train samples, "
                        f"expected way*shot = {expected}"
                    )

    @property
    def num_sessions(self) -> int:
        return len(self.tasks)


def joint_test_set(stream: SessionStream, upto: int) -> list[Sample]:
    """Union of the test sets of tasks 1..upto."""
    if not 1 <= upto <= len(stream.tasks):
        raise IndexError(f"session index {upto} outside [1, {len(stream.tasks)}]")
    samples: list[Sample] = []
    for task in stream.tasks[:upto]:
        samples.extend(task.test)
    return samples


@dataclass
class SyntheticStreamConfig:
    num_base_classes: int = 20
    num_sessions: int = 5
    way: int = 5
    shot: int = 5
    feature_dim: int = 16
    samples_per_base_class: int = 100
    test_per_class: int = 20
    blob_spread: float = 0.75
    seed: int = 0
    # supercluster layout: class means are drawn around num_clusters centers so
    # novel classes share coarse structure with base classes
    num_clusters: int = 4
    cluster_scale: float = 6.0
    class_spread: float = 1.5
    semantic_noise: float = 0.05
    protocol: str = "FSCIL"
    # DFSL only: size of the novel pool and its per-class sample counts
    dfsl_pool_classes: int = 20
    samples_per_novel_class: int = 20


def _blob_task(rng, index, classes, means_by_class, train_per_class, test_per_class, spread, way, shot):
    train: list[Sample] = []
    test: list[Sample] = []
    dim = next(iter(means_by_class.values())).shape[0]
    for name in classes:
        mean = means_by_class[name]
        for _ in range(train_per_class):
            x = (mean + spread * rng.standard_normal(dim)).astype(np.float32)
            train.append(Sample(x=x, label=name, task_index=index))
        for _ in range(test_per_class):
            x = (mean + spread * rng.standard_normal(dim)).astype(np.float32)
            test.append(Sample(x=x, label=name, task_index=index))
    return TaskSpec(
        index=index, classes=tuple(classes), train=tuple(train), test=tuple(test),
        way=way, shot=shot,
    )


def build_synthetic_stream(cfg: SyntheticStreamConfig) -> SessionStream:
    """Deterministic Gaussian-blob stream with matching synthetic semantics."""
    for name in ("num_base_classes", "num_sessions", "feature_dim",
                 "samples_per_base_class", "test_per_class", "num_clusters"):
        if getattr(cfg, name) <= 0:
            raise ConfigurationError(f"{name} must be positive, got {getattr(cfg, name)}")
    if cfg.blob_spread < 0 or cfg.semantic_noise < 0:
        raise ConfigurationError("spreads and noise scales must be non-negative")
    if cfg.protocol == "FSCIL":
        if cfg.num_sessions > 1 and (cfg.way <= 0 or cfg.shot <= 0):
            raise ConfigurationError("way and shot must be positive for few-shot sessions")
        num_novel = cfg.way * (cfg.num_sessions - 1)
    elif cfg.protocol == "DFSL":
        if cfg.num_sessions != 2:
            raise ConfigurationError("DFSL streams have exactly 2 tasks")
        if cfg.dfsl_pool_classes <= 0 or cfg.samples_per_novel_class <= 0:
            raise ConfigurationError("DFSL pool sizes must be positive")
        num_novel = cfg.dfsl_pool_classes
    else:
        raise ConfigurationError(f"unknown protocol {cfg.protocol!r}")

    rng = np.random.default_rng(cfg.seed)
    total = cfg.num_base_classes + num_novel
    cluster_centers = cfg.cluster_scale * rng.standard_normal((cfg.num_clusters, cfg.feature_dim))
    means = np.empty((total, cfg.feature_dim))
    for i in range(total):
        means[i] = cluster_centers[i % cfg.num_clusters] + cfg.class_spread * rng.standard_normal(
            cfg.feature_dim
        )
    names = [f"class_{i:03d}" for i in range(total)]
    semantics = synthesize_semantics(
        list(means), cfg.semantic_noise, seed=int(rng.integers(2**31 - 1)), names=names
    )
    means_by_class = {name: means[i] for i, name in enumerate(names)}

    order = list(rng.permutation(total))
    base_classes = [names[i] for i in order[: cfg.num_base_classes]]
    novel_order = [names[i] for i in order[cfg.num_base_classes:]]

    tasks = [
        _blob_task(
            rng, 1, base_classes, means_by_class, cfg.samples_per_base_class,
            cfg.test_per_class, cfg.blob_spread, way=len(base_classes),
            shot=cfg.samples_per_base_class,
        )
    ]
    if cfg.protocol == "FSCIL":
        for t in range(2, cfg.num_sessions + 1):
            chunk = novel_order[(t - 2) * cfg.way: (t - 1) * cfg.way]
            tasks.append(
                _blob_task(
                    rng, t, chunk, means_by_class, cfg.shot, cfg.test_per_class,
                    cfg.blob_spread, way=cfg.way, shot=cfg.shot,
                )
            )
    else:
        tasks.append(
            _blob_task(
                rng, 2, novel_order, means_by_class, cfg.samples_per_novel_class,
                cfg.test_per_class, cfg.blob_spread, way=len(novel_order),
                shot=cfg.samples_per_novel_class,
            )
        )
    return SessionStream(tasks=tuple(tasks), semantics=semantics, protocol=cfg.protocol)


def _load_image(path: str, image_size: int, channel_mean, channel_std) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        img = img.convert("RGB").resize((image_size, image_size))
        arr = np.asarray(img, dtype=np.float32) / 255.0
    mean = np.asarray(channel_mean, dtype=np.float32).reshape(1, 1, -1)
    std = np.asarray(channel_std, dtype=np.float32).reshape(1, 1, -1)
    return (arr - mean) / std


def build_image_stream(
    root,
    split_spec,
    way: int,
    shot: int,
    seed: int,
    *,
    semantics: SemanticTable,
    image_size: int = 32,
    test_per_class: int = 4,
    channel_mean=(0.5, 0.5, 0.5),
    channel_std=(0.5, 0.5, 0.5),
) -> SessionStream:
    """Stream from one folder of images per class plus a JSON split spec.

    The split spec is ``{"base": [names], "sessions": [[names], ...]}``.  Each
    class folder is deterministically shuffled; the first ``test_per_class``
    files are held out as that class's test set, novel-session support samples
    are drawn from the remainder.
    """
    with open(split_spec, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    base = list(spec["base"])
    sessions = [list(s) for s in spec.get("sessions", [])]
    for pos, sess in enumerate(sessions, start=2):
        if len(sess) != way:
            raise ConfigurationError(
                f"session {pos} lists {len(sess)} classes, expected way={way}"
            )

    rng = np.random.default_rng(seed)
    files_by_class: dict[str, list[str]] = {}
    for name in base + [c for sess in sessions for c in sess]:
        folder = os.path.join(root, name)
        if not os.path.isdir(folder):
            raise DatasetError(f"missing class folder: {folder}")
        files = sorted(
            os.path.join(folder, f)
            for f in os.listdir(folder)
            if f.lower().endswith(IMAGE_EXTENSIONS)
        )
        if len(files) <= test_per_class:
            raise DatasetError(
                f"class {name!r} has {len(files)} images, needs more than {test_per_class}"
            )
        files = [files[i] for i in rng.permutation(len(files))]
        files_by_class[name] = files

    def load_all(paths, label, index):
        return [
            Sample(x=_load_image(p, image_size, channel_mean, channel_std), label=label,
                   task_index=index)
            for p in paths
        ]

    tasks: list[TaskSpec] = []
    train, test = [], []
    for name in base:
        files = files_by_class[name]
        test.extend(load_all(files[:test_per_class], name, 1))
        train.extend(load_all(files[test_per_class:], name, 1))
    tasks.append(TaskSpec(index=1, classes=tuple(base), train=tuple(train), test=tuple(test),
                          way=len(base), shot=0))

    for pos, sess in enumerate(sessions, start=2):
        train, test = [], []
        for name in sess:
            files = files_by_class[name]
            pool = files[test_per_class:]
            if len(pool) < shot:
                raise DatasetError(
                    f"class {name!r} has {len(pool)} trainable images, needs shot={shot}"
                )
            picks = [pool[i] for i in rng.choice(len(pool), size=shot, replace=False)]
            train.extend(load_all(picks, name, pos))
            test.extend(load_all(files[:test_per_class], name, pos))
        tasks.append(TaskSpec(index=pos, classes=tuple(sess), train=tuple(train),
                              test=tuple(test), way=way, shot=shot))
    return SessionStream(tasks=tuple(tasks), semantics=semantics, protocol="FSCIL")
