"""Stream construction: synthetic blobs, image folders, joint test pools."""

import json

import numpy as np
import pytest

from semkd.errors import ConfigurationError, DatasetError
from semkd.semantics import synthesize_semantics
from semkd.sessions import (
    SyntheticStreamConfig,
    build_image_stream,
    build_synthetic_stream,
    joint_test_set,
)


def small_cfg(**kw):
    base = dict(
        num_base_classes=6, num_sessions=3, way=2, shot=3, feature_dim=5,
        samples_per_base_class=8, test_per_class=4, blob_spread=0.4, seed=0,
        num_clusters=2,
    )
    base.update(kw)
    return SyntheticStreamConfig(**base)


class TestSyntheticStream:
    def test_single_session_stream(self):
        stream = build_synthetic_stream(small_cfg(num_sessions=1))
        assert len(stream.tasks) == 1
        assert stream.tasks[0].index == 1

    def test_novel_tasks_have_way_times_shot_samples(self):
        stream = build_synthetic_stream(small_cfg(num_sessions=5, way=5, shot=5,
                                                  num_base_classes=10))
        for task in stream.tasks[1:]:
            assert len(task.train) == 25
            assert len(task.classes) == 5

    def test_deterministic(self):
        a = build_synthetic_stream(small_cfg(seed=42))
        b = build_synthetic_stream(small_cfg(seed=42))
        for ta, tb in zip(a.tasks, b.tasks):
            assert ta.classes == tb.classes
            for sa, sb in zip(ta.train, tb.train):
                np.testing.assert_array_equal(sa.x, sb.x)
                assert sa.label == sb.label
        for name in a.semantics.classes:
            np.testing.assert_array_equal(a.semantics[name], b.semantics[name])

    def test_classes_disjoint_across_tasks(self):
        for seed in range(5):
            stream = build_synthetic_stream(small_cfg(seed=seed, num_sessions=4))
            seen = set()
            for task in stream.tasks:
                assert not seen.intersection(task.classes)
                seen.update(task.classes)

    def test_semantics_cover_all_classes(self):
        stream = build_synthetic_stream(small_cfg())
        for task in stream.tasks:
            for c in task.classes:
                assert c in stream.semantics

    def test_labels_match_task_classes(self):
        stream = build_synthetic_stream(small_cfg())
        for task in stream.tasks:
            for s in task.train + task.test:
                assert s.label in task.classes
                assert s.task_index == task.index

    def test_inconsistent_counts_rejected(self):
        with pytest.raises(ConfigurationError):
            build_synthetic_stream(small_cfg(num_base_classes=0))
        with pytest.raises(ConfigurationError):
            build_synthetic_stream(small_cfg(way=0, num_sessions=2))
        with pytest.raises(ConfigurationError):
            build_synthetic_stream(small_cfg(blob_spread=-1.0))

    def test_dfsl_stream_has_pool_task(self):
        cfg = small_cfg(num_sessions=2, protocol="DFSL", dfsl_pool_classes=5,
                        samples_per_novel_class=7)
        stream = build_synthetic_stream(cfg)
        assert stream.protocol == "DFSL"
        assert len(stream.tasks) == 2
        pool = stream.tasks[1]
        assert len(pool.classes) == 5
        assert len(pool.train) == 5 * 7

    def test_dfsl_needs_two_sessions(self):
        with pytest.raises(ConfigurationError):
            build_synthetic_stream(small_cfg(num_sessions=3, protocol="DFSL"))


class TestJointTestSet:
    def _stream(self):
        return build_synthetic_stream(
            small_cfg(num_base_classes=20, num_sessions=2, way=5, shot=5,
                      test_per_class=5, num_clusters=4)
        )

    def test_base_only(self):
        stream = self._stream()
        pool = joint_test_set(stream, 1)
        assert len(pool) == 100
        assert all(s.task_index == 1 for s in pool)

    def test_additive_union(self):
        # |test^1| = 20*5 = 100, |test^2| = 5*5 = 25
        stream = self._stream()
        assert len(joint_test_set(stream, 2)) == 125

    def test_full_stream(self):
        stream = build_synthetic_stream(small_cfg(num_sessions=4))
        pool = joint_test_set(stream, 4)
        assert len(pool) == sum(len(t.test) for t in stream.tasks)

    def test_prefix_subset_property(self):
        stream = build_synthetic_stream(small_cfg(num_sessions=4))
        for t in range(1, 4):
            smaller = joint_test_set(stream, t)
            larger = joint_test_set(stream, t + 1)
            assert len(larger) == len(smaller) + len(stream.tasks[t].test)
            assert larger[: len(smaller)] == smaller

    def test_out_of_range(self):
        stream = self._stream()
        with pytest.raises(IndexError):
            joint_test_set(stream, 0)
        with pytest.raises(IndexError):
            joint_test_set(stream, 3)


@pytest.fixture(scope="module")
def image_root(tmp_path_factory):
    """10 classes x 20 tiny PNGs plus a split spec: 6 base + 2 sessions of 2-way."""
    from PIL import Image

    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(0)
    names = [f"class{i}" for i in range(10)]
    for i, name in enumerate(names):
        folder = root / name
        folder.mkdir()
        for j in range(20):
            arr = rng.integers(0, 255, size=(8, 8, 3), dtype=np.uint8)
            arr[:, :, 0] = i * 20  # weak class signal
            Image.fromarray(arr).save(folder / f"img_{j:02d}.png")
    split = {"base": names[:6], "sessions": [names[6:8], names[8:10]]}
    spec = root / "split.json"
    spec.write_text(json.dumps(split))
    return root, spec, names


def _image_semantics(names, dim=4):
    means = [np.full(dim, i + 1.0) for i in range(len(names))]
    return synthesize_semantics(means, 0.0, seed=0, names=names)


class TestImageStream:
    def test_fixture_counts_match_split(self, image_root):
        root, spec, names = image_root
        # oracle: file counts per class folder
        files_per_class = {n: 20 for n in names}
        test_per_class = 4
        stream = build_image_stream(
            root, spec, way=2, shot=5, seed=1,
            semantics=_image_semantics(names), image_size=8, test_per_class=test_per_class,
        )
        assert len(stream.tasks) == 3
        base = stream.tasks[0]
        assert len(base.train) == sum(files_per_class[n] - test_per_class for n in names[:6])
        assert len(base.test) == 6 * test_per_class
        for task in stream.tasks[1:]:
            assert len(task.train) == 2 * 5
            assert len(task.test) == 2 * test_per_class
        seen = set()
        for task in stream.tasks:
            assert not seen.intersection(task.classes)
            seen.update(task.classes)

    def test_images_standardized_shape(self, image_root):
        root, spec, names = image_root
        stream = build_image_stream(
            root, spec, way=2, shot=5, seed=1,
            semantics=_image_semantics(names), image_size=8,
        )
        sample = stream.tasks[0].train[0]
        assert sample.x.shape == (8, 8, 3)
        assert sample.x.dtype == np.float32

    def test_shot_exceeds_available(self, image_root):
        root, spec, names = image_root
        with pytest.raises(DatasetError):
            build_image_stream(
                root, spec, way=2, shot=17, seed=1,
                semantics=_image_semantics(names), image_size=8, test_per_class=4,
            )

    def test_missing_class_folder(self, image_root, tmp_path):
        root, spec, names = image_root
        bad = tmp_path / "bad_split.json"
        bad.write_text(json.dumps({"base": names[:6] + ["ghost"], "sessions": []}))
        with pytest.raises(DatasetError):
            build_image_stream(
                root, bad, way=2, shot=5, seed=1,
                semantics=_image_semantics(names + ["ghost"]), image_size=8,
            )

    def test_way_mismatch(self, image_root):
        root, spec, names = image_root
        with pytest.raises(ConfigurationError):
            build_image_stream(
                root, spec, way=3, shot=5, seed=1,
                semantics=_image_semantics(names), image_size=8,
            )

    def test_deterministic_sampling(self, image_root):
        root, spec, names = image_root
        kw = dict(way=2, shot=5, seed=7, semantics=_image_semantics(names), image_size=8)
        a = build_image_stream(root, spec, **kw)
        b = build_image_stream(root, spec, **kw)
        for ta, tb in zip(a.tasks, b.tasks):
            for sa, sb in zip(ta.train, tb.train):
                np.testing.assert_array_equal(sa.x, sb.x)
