"""Network components and the similarity classifier head.

An input runs through a backbone into a global feature ``g``, through N
parallel embedding modules whose outputs are fused by learned softmax
attention into ``e``, and ``concat(g, e)`` is mapped into the semantic space.
Classification is by cosine distance between the mapped vector and the stored
per-class semantic vectors, so adding classes never adds trainable weights.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import (
    ConfigurationError,
    DegenerateVectorError,
    DuplicateError,
    ParseError,
    ShapeError,
)

CHECKPOINT_MAGIC = "SEMKD1"


@dataclass
class ModelConfig:
    backbone: str = "mlp"  # "mlp" for vector inputs, "cnn" for images
    input_dim: int = 16  # mlp only
    image_channels: int = 3  # cnn only
    backbone_hidden: int = 64
    feature_dim: int = 32  # u
    semantic_dim: int = 16  # d
    num_embeddings: int = 3  # N
    attention_hidden: int = 64  # L
    mapping_hidden: tuple[int, int] = (512, 728)

    def __post_init__(self):
        if self.backbone not in ("mlp", "cnn"):
            raise ConfigurationError(f"unknown backbone kind {self.backbone!r}")
        for name in ("feature_dim", "semantic_dim", "num_embeddings", "attention_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        self.mapping_hidden = tuple(self.mapping_hidden)
        if len(self.mapping_hidden) != 2:
            raise ConfigurationError("mapping_hidden must list exactly two widths")


class MlpBackbone(nn.Module):
    def __init__(self, input_dim: int, hidden: int, feature_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(input_dim, hidden)
        self.fc2 = nn.Linear(hidden, feature_dim)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class ConvBackbone(nn.Module):
    """Three conv blocks, global average pooling, then a linear projection."""

    def __init__(self, channels: int, feature_dim: int):
        super().__init__()
        widths = (16, 32, 64)
        blocks = []
        prev = channels
        for w in widths:
            blocks += [nn.Conv2d(prev, w, kernel_size=3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            prev = w
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(widths[-1], feature_dim)

    def forward(self, x):
        h = self.pool(self.blocks(x)).flatten(1)
        return self.fc(h)


class AttentionFusion(nn.Module):
    """Scores each embedding output with ``w . tanh(V e)`` and softmax-normalizes."""

    def __init__(self, feature_dim: int, hidden: int):
        super().__init__()
        self.v = nn.Linear(feature_dim, hidden, bias=False)
        self.w = nn.Linear(hidden, 1, bias=False)

    def logits(self, per_module):
        # per_module: (batch, N, u) -> (batch, N)
        return self.w(torch.tanh(self.v(per_module))).squeeze(-1)


class MappingHead(nn.Module):
    """Maps concat(g, e) into the semantic space; ReLU on hidden layers only."""

    def __init__(self, in_dim: int, hidden: tuple[int, int], out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden[0])
        self.fc2 = nn.Linear(hidden[0], hidden[1])
        self.fc3 = nn.Linear(hidden[1], out_dim)

    def hidden_activations(self, f):
        h1 = torch.relu(self.fc1(f))
        h2 = torch.relu(self.fc2(h1))
        return h1, h2

    def forward(self, f):
        _, h2 = self.hidden_activations(f)
        return self.fc3(h2)


class ModelState(nn.Module):
    """Backbone + N embedding modules + attention + mapping, with frozen flags."""

    COMPONENTS = ("backbone", "embeddings", "attention", "mapping")

    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        if cfg.backbone == "mlp":
            self.backbone = MlpBackbone(cfg.input_dim, cfg.backbone_hidden, cfg.feature_dim)
        else:
            self.backbone = ConvBackbone(cfg.image_channels, cfg.feature_dim)
        self.embeddings = nn.ModuleList(
            nn.Linear(cfg.feature_dim, cfg.feature_dim) for _ in range(cfg.num_embeddings)
        )
        self.attention = AttentionFusion(cfg.feature_dim, cfg.attention_hidden)
        self.mapping = MappingHead(
            2 * cfg.feature_dim, cfg.mapping_hidden, cfg.semantic_dim
        )
        self.frozen = {name: False for name in self.COMPONENTS}
        if dtype != torch.float32:
            self.to(dtype)

    def component(self, name: str) -> nn.Module:
        return {
            "backbone": self.backbone,
            "embeddings": self.embeddings,
            "attention": self.attention,
            "mapping": self.mapping,
        }[name]

    def set_frozen(self, **flags: bool) -> None:
        for name, frozen in flags.items():
            if name not in self.frozen:
                raise ConfigurationError(f"unknown component {name!r}")
            self.frozen[name] = frozen
            self.component(name).requires_grad_(not frozen)

    def set_trainable_components(self, trainable) -> None:
        self.set_frozen(**{name: name not in set(trainable) for name in self.COMPONENTS})


def count_trainable(state: ModelState) -> int:
    return sum(p.numel() for p in state.parameters() if p.requires_grad)


def samples_to_batch(samples, backbone: str, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack sample arrays into a model input batch (images go HWC -> CHW)."""
    arr = np.stack([s.x for s in samples])
    batch = torch.as_tensor(arr, dtype=dtype)
    if backbone == "cnn":
        if batch.ndim != 4:
            raise ShapeError(f"image batch must be (batch, H, W, C), got {tuple(batch.shape)}")
        batch = batch.permute(0, 3, 1, 2).contiguous()
    return batch


def backbone_forward(state: ModelState, x: torch.Tensor) -> torch.Tensor:
    """Global feature g for a batch of inputs."""
    if state.cfg.backbone == "mlp":
        if x.ndim != 2 or x.shape[1] != state.cfg.input_dim:
            raise ShapeError(f"expected (batch, {state.cfg.input_dim}) input, got {tuple(x.shape)}")
    else:
        if x.ndim != 4 or x.shape[1] != state.cfg.image_channels:
            raise ShapeError(
                f"expected (batch, {state.cfg.image_channels}, H, W) input, got {tuple(x.shape)}"
            )
    return state.backbone(x)


def embed_each(state: ModelState, g: torch.Tensor) -> torch.Tensor:
    """Per-module embeddings, shape (batch, N, u)."""
    return torch.stack([module(g) for module in state.embeddings], dim=1)


def attention_fuse(state: ModelState, g: torch.Tensor):
    """Fused embedding and its attention weights: (e, alphas)."""
    per_module = embed_each(state, g)
    alphas = torch.softmax(state.attention.logits(per_module), dim=1)
    fused = (alphas.unsqueeze(-1) * per_module).sum(dim=1)
    return fused, alphas


def map_to_semantic(state: ModelState, g: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    if g.shape != e.shape:
        raise ShapeError(f"g {tuple(g.shape)} and e {tuple(e.shape)} must match")
    return state.mapping(torch.cat([g, e], dim=-1))


def forward_semantic(state: ModelState, g: torch.Tensor):
    """Full post-backbone path: returns (y, fused, alphas, per_module)."""
    per_module = embed_each(state, g)
    alphas = torch.softmax(state.attention.logits(per_module), dim=1)
    fused = (alphas.unsqueeze(-1) * per_module).sum(dim=1)
    y = state.mapping(torch.cat([g, fused], dim=-1))
    return y, fused, alphas, per_module


class ClassifierHead:
    """Append-only list of (class id, semantic vector) scored by cosine distance."""

    def __init__(self, semantic_dim: int, dtype: torch.dtype = torch.float32):
        if semantic_dim <= 0:
            raise ConfigurationError(f"semantic_dim must be positive, got {semantic_dim}")
        self.semantic_dim = semantic_dim
        self.dtype = dtype
        self.class_ids: list[str] = []
        self._semantics = torch.empty((0, semantic_dim), dtype=dtype)

    def __len__(self) -> int:
        return len(self.class_ids)

    def __contains__(self, class_id: str) -> bool:
        return class_id in self._index

    @property
    def _index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.class_ids)}

    @property
    def semantics(self) -> torch.Tensor:
        return self._semantics

    def index_of(self, class_id: str) -> int:
        try:
            return self._index[class_id]
        except KeyError:
            raise KeyError(f"class {class_id!r} not registered") from None

    def register(self, new_semantics) -> None:
        rows = []
        names = []
        existing = set(self.class_ids)
        for class_id, vec in new_semantics:
            if class_id in existing or class_id in names:
                raise DuplicateError(f"class {class_id!r} already registered")
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.semantic_dim,):
                raise ShapeError(
                    f"semantic vector for {class_id!r} has shape {vec.shape}, "
                    f"expected ({self.semantic_dim},)"
                )
            if not np.linalg.norm(vec) > 0:
                raise DegenerateVectorError(f"semantic vector for {class_id!r} has zero norm")
            names.append(class_id)
            rows.append(torch.as_tensor(vec, dtype=self.dtype))
        if rows:
            self.class_ids.extend(names)
            self._semantics = torch.cat([self._semantics, torch.stack(rows)], dim=0)


def register_session_classes(head: ClassifierHead, new_semantics) -> ClassifierHead:
    head.register(new_semantics)
    return head


def score(head: ClassifierHead, y: torch.Tensor) -> torch.Tensor:
    """Cosine distances (1 - cosine similarity) to every registered class.

    Accepts a single vector or a batch; distances lie in [0, 2].
    """
    if len(head) == 0:
        raise ConfigurationError("classifier head has no registered classes")
    single = y.ndim == 1
    if single:
        y = y.unsqueeze(0)
    if y.shape[-1] != head.semantic_dim:
        raise ShapeError(f"y has dim {y.shape[-1]}, head expects {head.semantic_dim}")
    norms = y.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise DegenerateVectorError("zero-norm mapped vector cannot be scored")
    sem = head.semantics.to(y.dtype)
    sem = sem / sem.norm(dim=-1, keepdim=True)
    distances = 1.0 - (y / norms) @ sem.T
    return distances.squeeze(0) if single else distances


def predict(
    state: ModelState,
    head: ClassifierHead,
    x: torch.Tensor,
    candidates=None,
) -> list[str]:
    """Per-sample argmin-distance class ids; ties go to the lowest head index.

    ``candidates`` optionally restricts prediction to a subset of registered
    class ids (used for restricted-label evaluation).
    """
    if len(head) == 0:
        raise ConfigurationError("classifier head has no registered classes")
    with torch.no_grad():
        g = backbone_forward(state, x)
        y, _, _, _ = forward_semantic(state, g)
        distances = score(head, y)
        if distances.ndim == 1:
            distances = distances.unsqueeze(0)
        if candidates is not None:
            cols = torch.tensor([head.index_of(c) for c in candidates], dtype=torch.long)
            picked = distances[:, cols].argmin(dim=1)
            return [head.class_ids[int(cols[i])] for i in picked]
        best = distances.argmin(dim=1)
        return [head.class_ids[int(i)] for i in best]


def save_checkpoint(path, state: ModelState, head: ClassifierHead, memory=None,
                    superclasses=None, extra=None) -> None:
    """Single-file archive of parameters, dims, frozen flags, head, and memory."""
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "model_cfg": asdict(state.cfg),
        "frozen": dict(state.frozen),
        "model": state.state_dict(),
        "head_classes": list(head.class_ids),
        "head_semantics": head.semantics.clone(),
        "extra": extra or {},
    }
    if memory is not None:
        payload["memory_classes"] = [c for c, _ in memory.entries]
        payload["memory_prototypes"] = torch.as_tensor(
            np.stack([p for _, p in memory.entries]) if len(memory.entries) else
            np.empty((0, memory.feature_dim), dtype=np.float32)
        )
        payload["memory_dim"] = memory.feature_dim
    if superclasses is not None:
        payload["superclasses"] = superclasses.to_json()
    torch.save(payload, path)


def load_checkpoint(path):
    """Restore (state, head, memory, superclasses, extra) from an archive."""
    from .memory import PrototypeMemory
    from .semantics import SuperclassMap

    payload = torch.load(path, weights_only=True)
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ParseError(f"not a {CHECKPOINT_MAGIC} checkpoint: {path}")
    cfg_data = dict(payload["model_cfg"])
    cfg_data["mapping_hidden"] = tuple(cfg_data["mapping_hidden"])
    cfg = ModelConfig(**cfg_data)
    state = ModelState(cfg)
    state.load_state_dict(payload["model"])
    state.set_frozen(**payload["frozen"])
    head = ClassifierHead(cfg.semantic_dim)
    sem = payload["head_semantics"]
    head.register(
        (c, sem[i].numpy()) for i, c in enumerate(payload["head_classes"])
    )
    memory = None
    if "memory_classes" in payload:
        protos = payload["memory_prototypes"].numpy()
        memory = PrototypeMemory(
            feature_dim=int(payload["memory_dim"]),
            entries=tuple(
                (c, protos[i].copy()) for i, c in enumerate(payload["memory_classes"])
            ),
        )
    superclasses = None
    if "superclasses" in payload:
        superclasses = SuperclassMap.from_json(payload["superclasses"])
    return state, head, memory, superclasses, payload.get("extra", {})
