"""Prototype rehearsal memory: one mean backbone feature per seen class.

Prototypes live in the backbone's feature space and re-enter training at the
embedding stage, so replay never re-runs the (frozen) backbone.  Entries are
append-only; a written prototype is never modified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DatasetError, DuplicateError, ShapeError


@dataclass(frozen=True)
class PrototypeMemory:
    feature_dim: int
    entries: tuple[tuple[str, np.ndarray], ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, class_id: str) -> bool:
        return any(c == class_id for c, _ in self.entries)

    @property
    def class_ids(self) -> list[str]:
        return [c for c, _ in self.entries]


def update_memory(mem: PrototypeMemory, task, backbone_features) -> PrototypeMemory:
    """Append one mean-feature prototype per class of ``task``.

    ``backbone_features`` maps each class id to its training samples' feature
    vectors.  Existing entries are untouched; re-adding a class is an error.
    """
    new_entries = list(mem.entries)
    for class_id in task.classes:
        if class_id in mem:
            raise DuplicateError(f"class {class_id!r} already has a prototype")
        feats = backbone_features.get(class_id)
        if not feats:
            raise DatasetError(f"no feature vectors for class {class_id!r}")
        stacked = np.stack([np.asarray(f, dtype=np.float64) for f in feats])
        if stacked.shape[1] != mem.feature_dim:
            raise ShapeError(
                f"features for {class_id!r} have dim {stacked.shape[1]}, "
                f"expected {mem.feature_dim}"
            )
        proto = stacked.mean(axis=0).astype(np.float32)
        proto.flags.writeable = False
        new_entries.append((class_id, proto))
    return PrototypeMemory(feature_dim=mem.feature_dim, entries=tuple(new_entries))


def replay_batch(mem: PrototypeMemory) -> list[tuple[np.ndarray, str]]:
    """All prototypes with their labels, in insertion order."""
    return [(proto, class_id) for class_id, proto in mem.entries]
