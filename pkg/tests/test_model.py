"""Network components: attention fusion, semantic mapping, similarity head."""

import math

import numpy as np
import pytest
import torch

from semkd.errors import (
    ConfigurationError,
    DegenerateVectorError,
    DuplicateError,
    ParseError,
    ShapeError,
)
from semkd.memory import PrototypeMemory
from semkd.model import (
    ClassifierHead,
    ModelConfig,
    ModelState,
    attention_fuse,
    backbone_forward,
    count_trainable,
    load_checkpoint,
    map_to_semantic,
    predict,
    register_session_classes,
    save_checkpoint,
    score,
)
from semkd.semantics import SuperclassMap


def tiny_cfg(**kw):
    base = dict(backbone="mlp", input_dim=4, backbone_hidden=6, feature_dim=3,
                semantic_dim=3, num_embeddings=2, attention_hidden=5,
                mapping_hidden=(7, 5))
    base.update(kw)
    return ModelConfig(**base)


class TestBackbone:
    def test_zero_input_zero_bias_gives_zero(self):
        torch.manual_seed(0)
        state = ModelState(tiny_cfg())
        with torch.no_grad():
            state.backbone.fc1.bias.zero_()
            state.backbone.fc2.bias.zero_()
        g = backbone_forward(state, torch.zeros(2, 4))
        assert torch.all(g == 0)

    def test_deterministic_forward(self):
        torch.manual_seed(1)
        state = ModelState(tiny_cfg())
        x = torch.randn(3, 4)
        a = backbone_forward(state, x)
        b = backbone_forward(state, x)
        assert torch.equal(a, b)

    def test_finite_outputs(self):
        torch.manual_seed(2)
        state = ModelState(tiny_cfg())
        g = backbone_forward(state, torch.randn(16, 4))
        assert torch.isfinite(g).all()
        assert g.shape == (16, 3)

    def test_shape_mismatch(self):
        state = ModelState(tiny_cfg())
        with pytest.raises(ShapeError):
            backbone_forward(state, torch.randn(2, 5))

    def test_cnn_backbone_shapes(self):
        torch.manual_seed(3)
        state = ModelState(tiny_cfg(backbone="cnn", image_channels=3, feature_dim=5))
        g = backbone_forward(state, torch.randn(2, 3, 16, 16))
        assert g.shape == (2, 5)
        with pytest.raises(ShapeError):
            backbone_forward(state, torch.randn(2, 16, 16))


class TestAttentionFuse:
    def test_single_module_weight_is_one(self):
        torch.manual_seed(4)
        state = ModelState(tiny_cfg(num_embeddings=1))
        g = torch.randn(5, 3)
        fused, alphas = attention_fuse(state, g)
        assert torch.allclose(alphas, torch.ones(5, 1))
        assert torch.allclose(fused, state.embeddings[0](g))

    def test_zero_scorer_gives_uniform_weights(self):
        torch.manual_seed(5)
        state = ModelState(tiny_cfg(num_embeddings=4))
        with torch.no_grad():
            state.attention.w.weight.zero_()
        _, alphas = attention_fuse(state, torch.randn(6, 3))
        assert torch.allclose(alphas, torch.full((6, 4), 0.25), atol=1e-7)

    def test_hand_set_two_module_logits(self):
        # logits (1, 0) -> softmax = (e/(e+1), 1/(e+1)); modules emit constants
        state = ModelState(tiny_cfg(input_dim=1, feature_dim=1, attention_hidden=1,
                                    num_embeddings=2, semantic_dim=2))
        with torch.no_grad():
            for module in state.embeddings:
                module.weight.zero_()
            state.embeddings[0].bias.fill_(math.atanh(0.5))
            state.embeddings[1].bias.zero_()
            state.attention.v.weight.fill_(1.0)
            state.attention.w.weight.fill_(2.0)  # 2*tanh(atanh(0.5)) = 1, 2*tanh(0) = 0
        _, alphas = attention_fuse(state, torch.zeros(1, 1))
        expected = math.e / (math.e + 1.0)
        assert alphas[0, 0].item() == pytest.approx(expected, abs=1e-6)
        assert alphas[0, 1].item() == pytest.approx(1.0 - expected, abs=1e-6)

    def test_weights_sum_to_one_nonnegative(self):
        torch.manual_seed(6)
        state = ModelState(tiny_cfg(num_embeddings=3))
        _, alphas = attention_fuse(state, torch.randn(100, 3))
        assert torch.all(alphas >= 0)
        assert torch.allclose(alphas.sum(dim=1), torch.ones(100), atol=1e-6)

    def test_fused_is_convex_combination(self):
        torch.manual_seed(7)
        state = ModelState(tiny_cfg(num_embeddings=3))
        g = torch.randn(4, 3)
        fused, alphas = attention_fuse(state, g)
        per = torch.stack([m(g) for m in state.embeddings], dim=1)
        assert torch.allclose(fused, (alphas.unsqueeze(-1) * per).sum(1), atol=1e-6)


class TestMapping:
    def test_zero_weights_give_zero_output(self):
        state = ModelState(tiny_cfg())
        with torch.no_grad():
            state.mapping.fc3.weight.zero_()
            state.mapping.fc3.bias.zero_()
        g = torch.randn(3, 3)
        e = torch.randn(3, 3)
        assert torch.all(map_to_semantic(state, g, e) == 0)

    def test_hidden_activations_non_negative(self):
        torch.manual_seed(8)
        state = ModelState(tiny_cfg())
        f = torch.randn(10, 6)
        h1, h2 = state.mapping.hidden_activations(f)
        assert torch.all(h1 >= 0)
        assert torch.all(h2 >= 0)

    def test_output_dimension(self):
        torch.manual_seed(9)
        state = ModelState(tiny_cfg(semantic_dim=11))
        y = map_to_semantic(state, torch.randn(4, 3), torch.randn(4, 3))
        assert y.shape == (4, 11)

    def test_shape_mismatch(self):
        state = ModelState(tiny_cfg())
        with pytest.raises(ShapeError):
            map_to_semantic(state, torch.randn(2, 3), torch.randn(3, 3))


def make_head(vectors, dtype=torch.float32):
    head = ClassifierHead(len(vectors[0][1]), dtype=dtype)
    head.register([(name, np.asarray(v, dtype=np.float64)) for name, v in vectors])
    return head


class TestScore:
    def test_parallel_vector_distance_zero(self):
        head = make_head([("a", [2.0, 0.0])])
        d = score(head, torch.tensor([4.0, 0.0]))
        assert d[0].item() == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal_vector_distance_one(self):
        head = make_head([("a", [1.0, 0.0])])
        d = score(head, torch.tensor([0.0, 3.0]))
        assert d[0].item() == pytest.approx(1.0, abs=1e-6)

    def test_formula_value(self):
        # 1 - cos([1,1],[1,0]) = 1 - 1/sqrt(2)
        head = make_head([("a", [1.0, 0.0])])
        d = score(head, torch.tensor([1.0, 1.0]))
        assert d[0].item() == pytest.approx(1.0 - 1.0 / math.sqrt(2.0), abs=1e-6)

    def test_range_zero_two(self):
        rng = np.random.default_rng(4)
        head = make_head([(f"c{i}", rng.normal(size=6)) for i in range(8)])
        y = torch.as_tensor(rng.normal(size=(50, 6)), dtype=torch.float32)
        d = score(head, y)
        assert float(d.min()) >= 0.0 - 1e-6
        assert float(d.max()) <= 2.0 + 1e-6

    def test_zero_norm_vector_rejected(self):
        head = make_head([("a", [1.0, 0.0])])
        with pytest.raises(DegenerateVectorError):
            score(head, torch.zeros(2))

    def test_zero_norm_semantic_rejected_at_registration(self):
        head = ClassifierHead(2)
        with pytest.raises(DegenerateVectorError):
            head.register([("a", np.zeros(2))])

    def test_empty_head_rejected(self):
        head = ClassifierHead(2)
        with pytest.raises(ConfigurationError):
            score(head, torch.ones(2))


class TestPredict:
    def _state_and_head(self, num_classes=3, seed=10):
        torch.manual_seed(seed)
        state = ModelState(tiny_cfg(semantic_dim=4))
        rng = np.random.default_rng(seed)
        head = make_head([(f"c{i}", rng.normal(size=4)) for i in range(num_classes)])
        return state, head

    def test_single_class_always_predicted(self):
        state, _ = self._state_and_head()
        head = make_head([("only", [1.0, 2.0, 3.0, 4.0])])
        preds = predict(state, head, torch.randn(5, 4))
        assert preds == ["only"] * 5

    def test_exact_semantic_match_wins(self):
        torch.manual_seed(11)
        state = ModelState(tiny_cfg(semantic_dim=4))
        x = torch.randn(1, 4)
        from semkd.model import forward_semantic

        with torch.no_grad():
            g = backbone_forward(state, x)
            y, _, _, _ = forward_semantic(state, g)
        head = make_head([("match", y[0].numpy()), ("other", -y[0].numpy())])
        assert predict(state, head, x) == ["match"]

    def test_matches_exhaustive_argmin(self):
        state, head = self._state_and_head(num_classes=3, seed=12)
        x = torch.randn(20, 4)
        preds = predict(state, head, x)
        from semkd.model import forward_semantic

        with torch.no_grad():
            g = backbone_forward(state, x)
            y, _, _, _ = forward_semantic(state, g)
            d = score(head, y)
        for i in range(20):
            best, best_d = None, float("inf")
            for k, name in enumerate(head.class_ids):
                if d[i, k].item() < best_d:
                    best, best_d = name, d[i, k].item()
            assert preds[i] == best

    def test_tie_breaks_to_lowest_index(self):
        state = ModelState(tiny_cfg(semantic_dim=4))
        head = make_head([("first", [1.0, 0.0, 0.0, 0.0]), ("second", [2.0, 0.0, 0.0, 0.0])])
        # identical directions -> identical distances -> first wins
        preds = predict(state, head, torch.randn(8, 4))
        assert preds == ["first"] * 8

    def test_invariant_to_positive_rescaling(self):
        rng = np.random.default_rng(13)
        head = make_head([(f"c{i}", rng.normal(size=4)) for i in range(5)])
        y = torch.as_tensor(rng.normal(size=(30, 4)), dtype=torch.float32)
        base = score(head, y).argmin(dim=1)
        for c in (0.5, 3.0, 250.0):
            assert torch.equal(score(head, y * c).argmin(dim=1), base)

    def test_restricted_candidates(self):
        state, head = self._state_and_head(num_classes=4, seed=14)
        x = torch.randn(10, 4)
        restricted = predict(state, head, x, candidates=["c1", "c3"])
        assert set(restricted) <= {"c1", "c3"}


class TestRegisterSessionClasses:
    def test_head_grows_params_constant(self):
        torch.manual_seed(15)
        state = ModelState(tiny_cfg(semantic_dim=4))
        rng = np.random.default_rng(15)
        head = make_head([(f"base{i}", rng.normal(size=4)) for i in range(60)])
        before = count_trainable(state)
        register_session_classes(head, [(f"new{i}", rng.normal(size=4)) for i in range(5)])
        assert len(head) == 65
        assert count_trainable(state) == before

    def test_duplicate_rejected(self):
        head = make_head([("a", [1.0, 0.0])])
        with pytest.raises(DuplicateError):
            head.register([("a", np.array([0.0, 1.0]))])

    def test_eight_sessions_of_five(self):
        rng = np.random.default_rng(16)
        head = make_head([(f"b{i}", rng.normal(size=4)) for i in range(60)])
        for s in range(8):
            register_session_classes(
                head, [(f"s{s}_{i}", rng.normal(size=4)) for i in range(5)]
            )
        assert len(head) == 100
        assert head.class_ids[:60] == [f"b{i}" for i in range(60)]


class TestFreezing:
    def test_frozen_flags_control_requires_grad(self):
        state = ModelState(tiny_cfg())
        total = count_trainable(state)
        state.set_frozen(backbone=True)
        frozen_total = count_trainable(state)
        backbone_params = sum(p.numel() for p in state.backbone.parameters())
        assert frozen_total == total - backbone_params
        state.set_frozen(backbone=False)
        assert count_trainable(state) == total

    def test_trainable_component_selection(self):
        state = ModelState(tiny_cfg())
        state.set_trainable_components({"attention", "mapping"})
        assert state.frozen == {"backbone": True, "embeddings": True,
                                "attention": False, "mapping": False}

    def test_unknown_component(self):
        state = ModelState(tiny_cfg())
        with pytest.raises(ConfigurationError):
            state.set_frozen(banana=True)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(17)
        state = ModelState(tiny_cfg())
        state.set_frozen(backbone=True)
        rng = np.random.default_rng(17)
        head = make_head([(f"c{i}", rng.normal(size=3)) for i in range(4)])
        memory = PrototypeMemory(
            feature_dim=3,
            entries=(("c0", np.ones(3, dtype=np.float32)),
                     ("c1", np.full(3, 2.0, dtype=np.float32))),
        )
        smap = SuperclassMap(2, np.array([[0.0, 1.0], [1.0, 0.0]]), {"c0": 1, "c1": 2}, seed=5)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, state, head, memory, smap, extra={"session": 3})

        state2, head2, memory2, smap2, extra = load_checkpoint(path)
        for (n1, p1), (n2, p2) in zip(state.named_parameters(), state2.named_parameters()):
            assert n1 == n2
            assert torch.equal(p1, p2)
        assert state2.frozen == state.frozen
        assert head2.class_ids == head.class_ids
        assert torch.allclose(head2.semantics, head.semantics)
        assert memory2.class_ids == ["c0", "c1"]
        np.testing.assert_array_equal(memory2.entries[0][1], memory.entries[0][1])
        assert smap2.assignment == smap.assignment
        assert extra == {"session": 3}

    def test_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        torch.save({"magic": "NOPE"}, path)
        with pytest.raises(ParseError):
            load_checkpoint(path)
