"""Incremental training orchestration.

The base session trains the backbone with plain cross-entropy, freezes it,
clusters the base classes into superclasses, pre-trains one embedding module
per superclass (each module sees only its own superclass's samples, scored by
a disposable shared head over superclass labels), then trains attention and
mapping with the classification and attention losses.  Every later session
registers its classes in the head, snapshots old-class scores, and minimizes
the three-term loss over the session's samples plus all memory prototypes,
updating attention, mapping, and embeddings only.  Prototypes enter at the
embedding stage; the backbone never sees them.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, DuplicateError, ProtocolError
from .losses import (
    DistillationContext,
    LossConfig,
    attention_loss,
    classification_loss,
    distillation_loss,
    total_loss,
)
from .memory import PrototypeMemory, replay_batch, update_memory
from .model import (
    ClassifierHead,
    ModelConfig,
    ModelState,
    backbone_forward,
    forward_semantic,
    register_session_classes,
    samples_to_batch,
    score,
)
from .semantics import SemanticTable, SuperclassMap, assign_novel_class, cluster_base_classes
from .sessions import SessionStream, TaskSpec

DEFAULT_EPOCHS = {"backbone": 100, "embeddings": 50, "base": 50, "novel": 40}

_TORCH_SEED_MASK = (1 << 63) - 1


def derive_seed(root: int, name: str) -> int:
    """Stable 64-bit child seed for a named phase of a run."""
    digest = hashlib.sha256(f"{root}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _TORCH_SEED_MASK


@dataclass
class TrainConfig:
    epochs_per_phase: dict = field(default_factory=dict)
    learning_rate: float = 1e-3
    batch_size: int = 128
    optimizer: str = "adam"
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    num_superclasses: int = 3
    seed: int = 0
    grad_clip: float = 0.0  # 0 disables clipping
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-8

    def __post_init__(self):
        epochs = dict(DEFAULT_EPOCHS)
        epochs.update(self.epochs_per_phase)
        unknown = set(epochs) - set(DEFAULT_EPOCHS)
        if unknown:
            raise ConfigurationError(f"unknown training phases: {sorted(unknown)}")
        if any(v < 0 for v in epochs.values()):
            raise ConfigurationError("epoch counts must be non-negative")
        self.epochs_per_phase = epochs
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size <= 0:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.num_superclasses <= 0:
            raise ConfigurationError("num_superclasses must be positive")
        if self.grad_clip < 0:
            raise ConfigurationError("grad_clip must be non-negative")


@dataclass
class RunState:
    model: ModelState
    head: ClassifierHead
    memory: PrototypeMemory
    superclasses: SuperclassMap
    superclass_of: dict
    semantics: SemanticTable
    session_index: int
    seed: int
    loss_log: list = field(default_factory=list)
    mid_session: bool = False


def clone_run_state(state: RunState) -> RunState:
    """Independent copy sharing only immutable pieces; episode logs start empty."""
    return RunState(
        model=copy.deepcopy(state.model),
        head=copy.deepcopy(state.head),
        memory=state.memory,
        superclasses=state.superclasses,
        superclass_of=dict(state.superclass_of),
        semantics=state.semantics,
        session_index=state.session_index,
        seed=state.seed,
    )


def _make_optimizer(params, cfg: TrainConfig):
    params = [p for p in params if p.requires_grad]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield torch.as_tensor(order[start : start + batch_size], dtype=torch.long)


def _backbone_features(model: ModelState, x: torch.Tensor, chunk: int = 512) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], chunk):
            outs.append(backbone_forward(model, x[start : start + chunk]))
    return torch.cat(outs, dim=0)


def _log(state: RunState, epoch: int, phase: str, lc=None, ld=None, la=None, total=None):
    state.loss_log.append(
        {"epoch": epoch, "phase": phase, "lc": lc, "ld": ld, "la": la, "total": total}
    )


def _step(opt, loss, model: ModelState, cfg: TrainConfig):
    opt.zero_grad()
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(
            [p for g in opt.param_groups for p in g["params"]], cfg.grad_clip
        )
    opt.step()


def default_model_config(stream: SessionStream) -> ModelConfig:
    sample = stream.tasks[0].train[0]
    if sample.x.ndim == 1:
        return ModelConfig(backbone="mlp", input_dim=int(sample.x.shape[0]))
    return ModelConfig(backbone="cnn", image_channels=int(sample.x.shape[-1]))


def train_base(stream: SessionStream, cfg: TrainConfig, model_cfg: ModelConfig | None = None) -> RunState:
    """Run the whole base session and return the state after its memory update."""
    base = stream.tasks[0]
    if cfg.num_superclasses > len(base.classes):
        raise ConfigurationError(
            f"{cfg.num_superclasses} superclasses requested for {len(base.classes)} base classes"
        )
    if model_cfg is None:
        model_cfg = default_model_config(stream)
    model_cfg = replace(
        model_cfg,
        num_embeddings=cfg.num_superclasses,
        semantic_dim=stream.semantics.dim,
    )
    torch.manual_seed(derive_seed(cfg.seed, "model-init"))
    model = ModelState(model_cfg)
    epochs = cfg.epochs_per_phase

    x_all = samples_to_batch(base.train, model_cfg.backbone)
    col_of = {c: i for i, c in enumerate(base.classes)}
    cols = torch.tensor([col_of[s.label] for s in base.train], dtype=torch.long)

    # supervised backbone training with a disposable linear head
    torch.manual_seed(derive_seed(cfg.seed, "phase-backbone"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "phase-backbone"))
    tmp_head = nn.Linear(model_cfg.feature_dim, len(base.classes))
    opt = _make_optimizer(list(model.backbone.parameters()) + list(tmp_head.parameters()), cfg)
    backbone_rows = []
    for epoch in range(epochs["backbone"]):
        running, batches = 0.0, 0
        for idx in _epoch_batches(len(base.train), cfg.batch_size, rng):
            logits = tmp_head(backbone_forward(model, x_all[idx]))
            ce = torch.nn.functional.cross_entropy(logits, cols[idx])
            _step(opt, ce, model, cfg)
            running += ce.detach().item()
            batches += 1
        backbone_rows.append((epoch, running / max(batches, 1)))
    model.set_frozen(backbone=True)

    smap = cluster_base_classes(
        stream.semantics,
        set(base.classes),
        cfg.num_superclasses,
        seed=derive_seed(cfg.seed, "kmeans"),
        max_iter=cfg.kmeans_max_iter,
        tol=cfg.kmeans_tol,
    )
    superclass_of = dict(smap.assignment)

    head = ClassifierHead(stream.semantics.dim)
    register_session_classes(head, [(c, stream.semantics[c]) for c in base.classes])

    state = RunState(
        model=model,
        head=head,
        memory=PrototypeMemory(feature_dim=model_cfg.feature_dim),
        superclasses=smap,
        superclass_of=superclass_of,
        semantics=stream.semantics,
        session_index=1,
        seed=cfg.seed,
    )
    for epoch, ce in backbone_rows:
        _log(state, epoch, "backbone", lc=ce, total=ce)

    g_all = _backbone_features(model, x_all)
    sc_cols = torch.tensor([superclass_of[s.label] - 1 for s in base.train], dtype=torch.long)

    # embedding pre-training: each sample flows through its own superclass's
    # module; a shared disposable head scores superclass identity
    torch.manual_seed(derive_seed(cfg.seed, "phase-embeddings"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "phase-embeddings"))
    aux_head = nn.Linear(model_cfg.feature_dim, cfg.num_superclasses)
    model.set_trainable_components({"embeddings"})
    opt = _make_optimizer(
        list(model.embeddings.parameters()) + list(aux_head.parameters()), cfg
    )
    from .model import embed_each

    for epoch in range(epochs["embeddings"]):
        running, batches = 0.0, 0
        for idx in _epoch_batches(len(base.train), cfg.batch_size, rng):
            per = embed_each(model, g_all[idx])
            own = per[torch.arange(len(idx)), sc_cols[idx]]
            ce = torch.nn.functional.cross_entropy(aux_head(own), sc_cols[idx])
            _step(opt, ce, model, cfg)
            running += ce.detach().item()
            batches += 1
        _log(state, epoch, "embeddings", lc=running / max(batches, 1),
             total=running / max(batches, 1))

    # joint base training of attention and mapping
    torch.manual_seed(derive_seed(cfg.seed, "phase-base"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "phase-base"))
    model.set_trainable_components({"attention", "mapping"})
    opt = _make_optimizer(
        list(model.attention.parameters()) + list(model.mapping.parameters()), cfg
    )
    sc_labels = sc_cols + 1
    for epoch in range(epochs["base"]):
        sums, batches = np.zeros(3), 0
        for idx in _epoch_batches(len(base.train), cfg.batch_size, rng):
            y, fused, _, per = forward_semantic(model, g_all[idx])
            distances = score(head, y)
            lc = classification_loss(distances, cols[idx])
            la = attention_loss(fused, per, sc_labels[idx], cfg.loss_cfg.attention_loss_form)
            loss = total_loss(lc, 0.0, la, cfg.loss_cfg, "base")
            _step(opt, loss, model, cfg)
            sums += (lc.detach().item(), la.detach().item(), loss.detach().item())
            batches += 1
        means = sums / max(batches, 1)
        _log(state, epoch, "base", lc=means[0], la=means[1], total=means[2])

    feats: dict[str, list[np.ndarray]] = {c: [] for c in base.classes}
    g_np = g_all.numpy()
    for i, sample in enumerate(base.train):
        feats[sample.label].append(g_np[i])
    state.memory = update_memory(state.memory, base, feats)
    return state


def snapshot_old_scores(state: RunState, inputs: torch.Tensor) -> DistillationContext:
    """Old-class cosine distances of embedding-stage inputs, before any update."""
    if state.mid_session:
        raise ProtocolError("old-score snapshot must precede all session updates")
    with torch.no_grad():
        y, _, _, _ = forward_semantic(state.model, inputs)
        distances = score(state.head, y)
    return DistillationContext(old_scores=distances.clone(), num_old=len(state.head))


def train_novel_session(state: RunState, task: TaskSpec, cfg: TrainConfig) -> RunState:
    """One few-shot session: register classes, distill, rehearse, update memory."""
    if state.mid_session:
        raise ProtocolError("previous session still in progress")
    if task.index != state.session_index + 1:
        raise ProtocolError(
            f"task index {task.index} does not follow session {state.session_index}"
        )
    overlap = [c for c in task.classes if c in state.head]
    if overlap:
        raise DuplicateError(f"classes already registered: {overlap}")

    model = state.model
    x_task = samples_to_batch(task.train, model.cfg.backbone)
    g_task = _backbone_features(model, x_task)

    replay = replay_batch(state.memory)
    if replay:
        g_replay = torch.as_tensor(np.stack([p for p, _ in replay]), dtype=g_task.dtype)
        pool_g = torch.cat([g_task, g_replay], dim=0)
        pool_labels = [s.label for s in task.train] + [c for _, c in replay]
    else:
        pool_g = g_task
        pool_labels = [s.label for s in task.train]
    is_task = torch.zeros(len(pool_labels), dtype=torch.bool)
    is_task[: len(task.train)] = True

    ctx = snapshot_old_scores(state, pool_g)

    for c in task.classes:
        state.superclass_of[c] = assign_novel_class(state.superclasses, state.semantics, c)
    register_session_classes(state.head, [(c, state.semantics[c]) for c in task.classes])

    cols = torch.tensor([state.head.index_of(lbl) for lbl in pool_labels], dtype=torch.long)
    sc_labels = torch.tensor([state.superclass_of[lbl] for lbl in pool_labels], dtype=torch.long)

    state.mid_session = True
    model.set_trainable_components({"attention", "mapping", "embeddings"})
    opt = _make_optimizer(
        list(model.attention.parameters())
        + list(model.mapping.parameters())
        + list(model.embeddings.parameters()),
        cfg,
    )
    rng = np.random.default_rng(derive_seed(cfg.seed, f"session-{task.index:03d}"))
    phase = f"novel-{task.index:02d}"
    for epoch in range(cfg.epochs_per_phase["novel"]):
        sums, batches = np.zeros(4), 0
        for idx in _epoch_batches(len(pool_labels), cfg.batch_size, rng):
            y, fused, _, per = forward_semantic(model, pool_g[idx])
            distances = score(state.head, y)
            lc = classification_loss(distances, cols[idx])
            ld = distillation_loss(
                distances,
                DistillationContext(ctx.old_scores[idx], ctx.num_old),
                cfg.loss_cfg.tau,
            )
            mask = is_task[idx]
            if bool(mask.any()):
                la = attention_loss(
                    fused[mask], per[mask], sc_labels[idx][mask],
                    cfg.loss_cfg.attention_loss_form,
                )
            else:
                la = torch.zeros((), dtype=y.dtype)
            loss = total_loss(lc, ld, la, cfg.loss_cfg, "novel")
            _step(opt, loss, model, cfg)
            sums += (lc.detach().item(), ld.detach().item(), la.detach().item(),
                     loss.detach().item())
            batches += 1
        means = sums / max(batches, 1)
        _log(state, epoch, phase, lc=means[0], ld=means[1], la=means[2], total=means[3])
    state.mid_session = False

    feats: dict[str, list[np.ndarray]] = {c: [] for c in task.classes}
    g_np = g_task.numpy()
    for i, sample in enumerate(task.train):
        feats[sample.label].append(g_np[i])
    state.memory = update_memory(state.memory, task, feats)
    state.session_index = task.index
    return state


def run_fscil(stream: SessionStream, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
              checkpoint_dir=None):
    """Full incremental run; returns the final state and one report per session."""
    from .evalsuite import evaluate_session
    from .model import save_checkpoint

    if stream.protocol != "FSCIL":
        raise ProtocolError(f"run_fscil needs an FSCIL stream, got {stream.protocol}")
    state = train_base(stream, cfg, model_cfg)
    reports = [evaluate_session(state, stream, 1)]
    if checkpoint_dir is not None:
        save_checkpoint(f"{checkpoint_dir}/session_01.ckpt", state.model, state.head,
                        state.memory, state.superclasses)
    for task in stream.tasks[1:]:
        state = train_novel_session(state, task, cfg)
        reports.append(evaluate_session(state, stream, task.index))
        if checkpoint_dir is not None:
            save_checkpoint(f"{checkpoint_dir}/session_{task.index:02d}.ckpt", state.model,
                            state.head, state.memory, state.superclasses)
    return state, reports


def run_dfsl(stream: SessionStream, cfg: TrainConfig, episode_cfg,
             model_cfg: ModelConfig | None = None):
    """Base training plus episodic two-task evaluation; returns (state, report)."""
    from .evalsuite import evaluate_dfsl

    if stream.protocol != "DFSL":
        raise ProtocolError(f"run_dfsl needs a DFSL stream, got {stream.protocol}")
    state = train_base(stream, cfg, model_cfg)

    def train_episode(base_state: RunState, task: TaskSpec) -> RunState:
        return train_novel_session(clone_run_state(base_state), task, cfg)

    report = evaluate_dfsl(state, stream, episode_cfg, train_episode)
    return state, report
