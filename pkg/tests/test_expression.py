"""Expression classifier, feature extraction, and class merging."""

import numpy as np
import pytest

from residen import ConfigError, LabelError
from residen.expression import (
    EMOTION_ORDER,
    ClassMergeMap,
    ExpressionExtractor,
    ExprNetConfig,
    FeatureReducer,
    build_expr_cnn,
    compose_merge_pairs,
    default_anger_disgust_merge,
    extract_expression_features,
    merge_classes,
    reduce_features,
)
from residen.layers import Ctx
from residen.residen_net import build_residen
from residen.tensor import Tensor

from conftest import tiny_expr_config, tiny_residen_config


class TestClassMergeMap:
    def test_identity(self):
        cmap = ClassMergeMap.identity(4)
        assert cmap.mapping == (0, 1, 2, 3)
        assert cmap.num_source == 4 and cmap.num_merged == 4
        assert cmap.apply([2, 0, 3]).tolist() == [2, 0, 3]

    def test_merge_pair_collapses_to_lower_index(self):
        cmap = ClassMergeMap.merge_pair(4, 3, 1)
        assert cmap.mapping == (0, 1, 2, 1)
        assert cmap.num_merged == 3
        assert cmap.apply([0, 1, 2, 3]).tolist() == [0, 1, 2, 1]

    def test_merge_pair_is_symmetric_in_arguments(self):
        assert ClassMergeMap.merge_pair(5, 1, 4) == ClassMergeMap.merge_pair(5, 4, 1)

    @pytest.mark.parametrize("a,b", [(0, 0), (-1, 2), (2, 7)])
    def test_merge_pair_rejects_bad_classes(self, a, b):
        with pytest.raises(ConfigError):
            ClassMergeMap.merge_pair(7, a, b)

    @pytest.mark.parametrize("mapping", [(), (0, 2), (-1, 0), (1, 1)])
    def test_mapping_must_cover_prefix(self, mapping):
        with pytest.raises(ConfigError):
            ClassMergeMap(mapping)

    def test_apply_rejects_out_of_range_labels(self):
        cmap = ClassMergeMap.identity(7)
        with pytest.raises(LabelError):
            cmap.apply([0, 7])
        with pytest.raises(LabelError):
            cmap.apply([-1])

    def test_apply_empty(self):
        assert ClassMergeMap.identity(3).apply([]).size == 0

    def test_default_merge_joins_anger_and_disgust(self):
        cmap = default_anger_disgust_merge()
        assert cmap.num_source == 7 and cmap.num_merged == 6
        names = cmap.merged_names(EMOTION_ORDER)
        assert names == ("surprise", "fear", "disgust+anger",
                         "happiness", "sadness", "neutral")
        # both source classes land on the same merged index
        d = EMOTION_ORDER.index("disgust")
        a = EMOTION_ORDER.index("anger")
        assert cmap.mapping[d] == cmap.mapping[a]

    def test_merged_names_length_checked(self):
        with pytest.raises(ConfigError):
            default_anger_disgust_merge().merged_names(("a", "b"))

    def test_merge_classes_helper(self):
        cmap = default_anger_disgust_merge()
        labels = list(range(7))
        assert merge_classes(labels, cmap).tolist() == cmap.apply(labels).tolist()

    def test_compose_empty_is_identity(self):
        assert compose_merge_pairs(5, []) == ClassMergeMap.identity(5)

    def test_compose_single_equals_merge_pair(self):
        assert compose_merge_pairs(7, [[2, 5]]) == ClassMergeMap.merge_pair(7, 2, 5)

    def test_compose_two_steps(self):
        cmap = compose_merge_pairs(7, [[2, 5], [0, 1]])
        assert cmap.num_merged == 5
        assert cmap.merged_names(EMOTION_ORDER) == (
            "surprise+fear", "disgust+anger", "happiness", "sadness", "neutral")

    def test_compose_matches_sequential_application(self):
        rng = np.random.Generator(np.random.PCG64(17))
        for _ in range(100):
            base = int(rng.integers(3, 10))
            n_pairs = int(rng.integers(1, base - 1))
            pairs = []
            k = base
            for _ in range(n_pairs):
                a, b = rng.choice(k, size=2, replace=False)
                pairs.append([int(a), int(b)])
                k -= 1
            cmap = compose_merge_pairs(base, pairs)
            assert cmap.num_merged == base - n_pairs
            labels = rng.integers(0, base, size=20)
            step = labels
            for (a, b), kk in zip(pairs, range(base, base - n_pairs, -1)):
                step = ClassMergeMap.merge_pair(kk, a, b).apply(step)
            assert cmap.apply(labels).tolist() == step.tolist()


class TestExprNetConfig:
    def test_stock_widths(self):
        cfg = ExprNetConfig()
        assert cfg.flatten_width() == 65536
        assert cfg.feature_width == 2048

    @pytest.mark.parametrize("kwargs", [
        dict(pool_after=(0,)),
        dict(pool_after=(5,)),
        dict(pool_after=(1, 1)),
        dict(fc_widths=(8,), fc_dropout=(0.1, 0.2)),
        dict(fc_dropout=(0.4, 0.2, 1.0)),
        dict(num_classes=1),
        dict(input_hw=50, pool_after=(1, 2)),
        dict(conv_channels=()),
        dict(fc_widths=()),
    ])
    def test_validate_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            ExprNetConfig(**{**dict(), **kwargs}).validate()

    def test_dict_round_trip(self):
        from residen.expression import config_from_dict
        cfg = tiny_expr_config()
        assert config_from_dict(cfg.to_dict()) == cfg


class TestExprCnnModel:
    def test_features_feed_classifier(self, rng):
        cfg = tiny_expr_config()
        model = build_expr_cnn(cfg, seed=4)
        x = Tensor(rng.normal(size=(2, 3, 32, 32)).astype(np.float32))
        grabbed = {}
        ctx = Ctx("eval", capture=grabbed)
        probs = model(x, ctx)
        assert probs.shape == (2, 7)
        assert np.allclose(np.asarray(probs.data).sum(axis=1), 1.0, atol=1e-5)
        feats = grabbed["expr_features"]
        assert feats.shape == (2, cfg.feature_width)

    def test_feature_width_property(self):
        assert build_expr_cnn(tiny_expr_config()).feature_width == 20


class TestExpressionExtractor:
    def test_wraps_expression_classifier(self, rng):
        cfg = tiny_expr_config()
        model = build_expr_cnn(cfg, seed=4)
        ex = ExpressionExtractor(model)
        assert ex.feature_width == cfg.feature_width
        x = Tensor(rng.normal(size=(2, 3, 32, 32)).astype(np.float32))
        out = ex.features(x, Ctx("eval"))
        direct = model.features(x, Ctx("eval"))
        assert np.array_equal(np.asarray(out.data), np.asarray(direct.data))

    def test_wraps_image_trunk_head(self, rng):
        model = build_residen(tiny_residen_config(), seed=1)
        ex = ExpressionExtractor(model)
        assert ex.feature_width == model.cfg.head_widths[-1]
        x = Tensor(rng.normal(size=(2, 3, 32, 32)).astype(np.float32))
        assert ex.features(x, Ctx("eval")).shape == (2, ex.feature_width)

    def test_rejects_model_without_feature_layer(self):
        with pytest.raises(ConfigError):
            ExpressionExtractor(FeatureReducer(8, (4,)))

    def test_freeze_and_unfreeze(self):
        model = build_expr_cnn(tiny_expr_config())
        ex = ExpressionExtractor(model)
        ex.freeze()
        assert all(not trainable for _, _, trainable in model.named_params())
        ex.unfreeze()
        assert any(trainable for _, _, trainable in model.named_params())

    def test_extract_helper_is_deterministic(self, rng):
        model = build_expr_cnn(tiny_expr_config(), seed=9)
        x = Tensor(rng.normal(size=(3, 3, 32, 32)).astype(np.float32))
        a = extract_expression_features(model, x)
        b = extract_expression_features(model, x)
        assert np.array_equal(np.asarray(a.data), np.asarray(b.data))
        assert a.shape == (3, 20)


class TestFeatureReducer:
    def test_squeezes_width(self, rng):
        red = FeatureReducer(20, (12, 10), seed=2)
        assert red.out_width == 10
        f = Tensor(rng.normal(size=(4, 20)).astype(np.float32))
        out = reduce_features(red, f)
        assert out.shape == (4, 10)

    def test_width_mismatch_rejected(self, rng):
        red = FeatureReducer(20, (12, 10))
        with pytest.raises(ConfigError):
            red(Tensor(rng.normal(size=(4, 16)).astype(np.float32)), Ctx("eval"))

    def test_needs_at_least_one_layer(self):
        with pytest.raises(ConfigError):
            FeatureReducer(20, ())

    def test_explicit_ctx_matches_default(self, rng):
        red = FeatureReducer(8, (6,), seed=5)
        f = Tensor(rng.normal(size=(2, 8)).astype(np.float32))
        a = reduce_features(red, f)
        b = reduce_features(red, f, Ctx("eval"))
        assert np.array_equal(np.asarray(a.data), np.asarray(b.data))
