"""Session metrics: joint accuracy, base/novel split, harmonic mean, and the
two-task episodic protocol with its forgetting gaps.

In the two-task protocol, "individual" accuracy restricts the candidate label
set to one side (base-only or episode-only), while "joint" uses every
registered class; forgetting is the per-side gap joint - individual, so a
negative gap is an accuracy drop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from .errors import EmptyInputError, ProtocolError, ShapeError
from .model import predict, samples_to_batch
from .sessions import SessionStream, TaskSpec, joint_test_set


def accuracy(predictions, labels) -> float:
    """Fraction of exact matches."""
    if len(predictions) != len(labels):
        raise ShapeError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise EmptyInputError("cannot compute accuracy of an empty batch")
    hits = sum(1 for p, t in zip(predictions, labels) if p == t)
    return hits / len(labels)


def harmonic_mean(a: float, b: float) -> float:
    if a + b <= 0:
        return 0.0
    return 2.0 * a * b / (a + b)


@dataclass
class SessionReport:
    session: int
    joint_acc: float
    acc_base: float
    acc_novel: float | None  # undefined for the base session
    hm: float | None
    per_class_acc: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "session": self.session,
            "joint_acc": self.joint_acc,
            "acc_base": self.acc_base,
            "acc_novel": self.acc_novel,
            "hm": self.hm,
            "per_class_acc": dict(self.per_class_acc),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SessionReport":
        return cls(
            session=int(data["session"]),
            joint_acc=float(data["joint_acc"]),
            acc_base=float(data["acc_base"]),
            acc_novel=None if data["acc_novel"] is None else float(data["acc_novel"]),
            hm=None if data["hm"] is None else float(data["hm"]),
            per_class_acc=dict(data.get("per_class_acc", {})),
        )


def _predict_samples(state, samples, chunk: int = 512) -> list[str]:
    preds: list[str] = []
    for start in range(0, len(samples), chunk):
        batch = samples_to_batch(samples[start : start + chunk], state.model.cfg.backbone)
        preds.extend(predict(state.model, state.head, batch))
    return preds


def evaluate_session(state, stream: SessionStream, t: int) -> SessionReport:
    """Joint evaluation over everything seen through session t."""
    tests = joint_test_set(stream, t)
    preds = _predict_samples(state, tests)
    labels = [s.label for s in tests]
    joint = accuracy(preds, labels)

    base_idx = [i for i, s in enumerate(tests) if s.task_index == 1]
    novel_idx = [i for i, s in enumerate(tests) if s.task_index > 1]
    acc_base = accuracy([preds[i] for i in base_idx], [labels[i] for i in base_idx])
    if novel_idx:
        acc_novel = accuracy([preds[i] for i in novel_idx], [labels[i] for i in novel_idx])
        hm = harmonic_mean(acc_base, acc_novel)
    else:
        acc_novel = None
        hm = None

    per_class: dict[str, float] = {}
    by_class: dict[str, list[int]] = {}
    for i, lbl in enumerate(labels):
        by_class.setdefault(lbl, []).append(i)
    for class_id in state.head.class_ids:
        idx = by_class.get(class_id)
        if idx:
            per_class[class_id] = accuracy([preds[i] for i in idx], [class_id] * len(idx))
    return SessionReport(
        session=t, joint_acc=joint, acc_base=acc_base, acc_novel=acc_novel, hm=hm,
        per_class_acc=per_class,
    )


@dataclass
class EpisodeConfig:
    way: int = 5
    shot: int = 5
    queries_per_class: int = 15
    base_queries: int = 75
    episodes: int = 600
    seed: int = 0
    confidence: float = 0.95


@dataclass(frozen=True)
class EpisodeOutcome:
    """Accuracies of one episode under joint and restricted label sets."""

    joint_acc: float
    joint_base_acc: float
    joint_novel_acc: float
    base_individual: float
    novel_individual: float


def episode_outcome(
    joint_preds_base, joint_preds_novel, restricted_preds_base, restricted_preds_novel,
    base_labels, novel_labels,
) -> EpisodeOutcome:
    """Pure arithmetic from one episode's predictions under both label sets."""
    joint_base = accuracy(joint_preds_base, base_labels)
    joint_novel = accuracy(joint_preds_novel, novel_labels)
    joint = accuracy(
        list(joint_preds_base) + list(joint_preds_novel),
        list(base_labels) + list(novel_labels),
    )
    return EpisodeOutcome(
        joint_acc=joint,
        joint_base_acc=joint_base,
        joint_novel_acc=joint_novel,
        base_individual=accuracy(restricted_preds_base, base_labels),
        novel_individual=accuracy(restricted_preds_novel, novel_labels),
    )


@dataclass
class DfslReport:
    joint_acc: float
    joint_ci: float  # confidence half-width over episodes
    base_individual: float
    novel_individual: float
    delta_b: float
    delta_n: float
    delta: float
    episodes: int

    def to_dict(self) -> dict:
        return {
            "joint_acc": self.joint_acc,
            "joint_ci": self.joint_ci,
            "base_individual": self.base_individual,
            "novel_individual": self.novel_individual,
            "delta_b": self.delta_b,
            "delta_n": self.delta_n,
            "delta": self.delta,
            "episodes": self.episodes,
        }


def _mean(values) -> float:
    return sum(values) / len(values)


def _half_width(values, confidence: float) -> float:
    n = len(values)
    if n < 2:
        return 0.0
    sem = stats.sem(values)
    if sem == 0:
        return 0.0
    return float(sem * stats.t.ppf((1.0 + confidence) / 2.0, n - 1))


def dfsl_from_outcomes(outcomes, confidence: float = 0.95) -> DfslReport:
    """Aggregate per-episode outcomes into the forgetting report.

    delta_b is the mean over episodes of (joint base accuracy - individual
    base accuracy); delta_n likewise for the novel side; delta is their
    average, so forgetting shows up as a negative number.
    """
    if not outcomes:
        raise EmptyInputError("no episode outcomes to aggregate")
    delta_b = _mean([o.joint_base_acc - o.base_individual for o in outcomes])
    delta_n = _mean([o.joint_novel_acc - o.novel_individual for o in outcomes])
    return DfslReport(
        joint_acc=_mean([o.joint_acc for o in outcomes]),
        joint_ci=_half_width([o.joint_acc for o in outcomes], confidence),
        base_individual=_mean([o.base_individual for o in outcomes]),
        novel_individual=_mean([o.novel_individual for o in outcomes]),
        delta_b=delta_b,
        delta_n=delta_n,
        delta=(delta_b + delta_n) / 2.0,
        episodes=len(outcomes),
    )


def _group_by_class(samples):
    groups: dict[str, list] = {}
    for s in samples:
        groups.setdefault(s.label, []).append(s)
    return groups


def evaluate_dfsl(state, stream: SessionStream, cfg: EpisodeConfig, train_episode) -> DfslReport:
    """Episodic two-task evaluation.

    Each episode samples ``way`` classes from the novel pool, trains a fresh
    copy of the post-base state on their support samples via
    ``train_episode(state, task)``, and scores base and novel queries under
    the joint head and under each side's restricted label set.
    """
    from .trainer import derive_seed

    if stream.protocol != "DFSL":
        raise ProtocolError(f"expected a DFSL stream, got {stream.protocol}")
    base_task, pool_task = stream.tasks
    pool_train = _group_by_class(pool_task.train)
    pool_test = _group_by_class(pool_task.test)
    pool_classes = sorted(pool_task.classes)
    base_classes = list(base_task.classes)

    outcomes = []
    for ep in range(cfg.episodes):
        rng = np.random.default_rng(derive_seed(cfg.seed, f"episode-{ep:05d}"))
        chosen = [pool_classes[i] for i in rng.choice(len(pool_classes), cfg.way, replace=False)]
        support, novel_queries = [], []
        for c in chosen:
            train_pool = pool_train[c]
            picks = rng.choice(len(train_pool), cfg.shot, replace=False)
            support.extend(train_pool[i] for i in picks)
            test_pool = pool_test[c]
            q = rng.choice(len(test_pool), min(cfg.queries_per_class, len(test_pool)),
                           replace=False)
            novel_queries.extend(test_pool[i] for i in q)
        base_pool = base_task.test
        b = rng.choice(len(base_pool), min(cfg.base_queries, len(base_pool)), replace=False)
        base_queries = [base_pool[i] for i in b]

        task = TaskSpec(
            index=2, classes=tuple(chosen), train=tuple(support), test=tuple(novel_queries),
            way=cfg.way, shot=cfg.shot,
        )
        ep_state = train_episode(state, task)

        backbone = ep_state.model.cfg.backbone
        xq_base = samples_to_batch(base_queries, backbone)
        xq_novel = samples_to_batch(novel_queries, backbone)
        joint_base = predict(ep_state.model, ep_state.head, xq_base)
        joint_novel = predict(ep_state.model, ep_state.head, xq_novel)
        only_base = predict(ep_state.model, ep_state.head, xq_base, candidates=base_classes)
        only_novel = predict(ep_state.model, ep_state.head, xq_novel, candidates=chosen)
        outcomes.append(
            episode_outcome(
                joint_base, joint_novel, only_base, only_novel,
                [s.label for s in base_queries], [s.label for s in novel_queries],
            )
        )
    return dfsl_from_outcomes(outcomes, cfg.confidence)
