import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxctr.core_model import (
    FeatureVector,
    FfmModel,
    FieldSchema,
    TrainConfig,
    count_flops,
    gradient,
    init_model,
    predict_logit,
    predict_proba,
    update,
)
from ctxctr.errors import CheckpointError, ConfigError, InputError, SchemaMismatchError

import _oracle


def two_field_model(**kw):
    schema = FieldSchema.build(["a"], ["b"])
    return init_model(schema, TrainConfig(**kw))


class TestSchemaAndVector:
    def test_build_assigns_kinds_in_order(self):
        s = FieldSchema.build(["geo", "hour"], ["ad"], "ctx_ctr")
        assert s.names_of("context") == ("geo", "hour")
        assert s.ids_of("item") == (2,)
        assert s.derived_field.field_id == 3

    def test_duplicate_names_rejected(self):
        with pytest.raises(ConfigError):
            FieldSchema.build(["a", "a"])

    def test_json_round_trip(self):
        s = FieldSchema.build(["a"], ["b"], "d")
        assert FieldSchema.from_json(s.to_json()) == s

    def test_vector_sorts_and_defaults_value(self):
        fv = FeatureVector([(1, 9), (0, 4, 2.0)])
        assert fv.entries == ((0, 4, 2.0), (1, 9, 1.0))

    def test_vector_rejects_duplicates_and_nan(self):
        with pytest.raises(InputError):
            FeatureVector([(0, 1), (0, 1)])
        with pytest.raises(InputError):
            FeatureVector([(0, 1, float("nan"))])

    def test_unknown_field_is_schema_mismatch(self):
        m = two_field_model()
        with pytest.raises(SchemaMismatchError):
            predict_logit(m, FeatureVector([(5, 1)]))


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"learning_rate": 0.0},
            {"l2": -1.0},
            {"k": 0},
            {"hash_bits": 7},
            {"hash_bits": 31},
            {"clip_eps": 0.5},
            {"model": "deepfm"},
        ],
    )
    def test_invalid_values(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_init_model_type_checks(self):
        with pytest.raises(ConfigError):
            init_model(["a"], TrainConfig())


class TestPrediction:
    def test_fresh_model_has_zero_bias(self):
        assert two_field_model().bias == 0.0

    def test_hand_example_logit(self):
        m = two_field_model(k=2)
        m.set_linear(1, 0.1)
        m.set_linear(2, -0.2)
        m.set_latent(1, 1, [0.5, -0.5])
        m.set_latent(2, 0, [0.2, 0.4])
        assert predict_logit(m, FeatureVector([(0, 1), (1, 2)])) == pytest.approx(-0.2, abs=1e-15)

    def test_zero_latents_give_zero_logit(self):
        m = two_field_model(k=2)
        for i, f in [(1, 1), (2, 0)]:
            m.set_latent(i, f, [0.0, 0.0])
        assert predict_logit(m, FeatureVector([(0, 1), (1, 2)])) == 0.0

    def test_single_feature_has_no_pair_term(self):
        m = two_field_model()
        m.bias = 0.3
        m.set_linear(7, 0.2)
        assert predict_logit(m, FeatureVector([(0, 7)])) == pytest.approx(0.5)

    def test_proba_examples(self):
        m = two_field_model()
        assert predict_proba(m, FeatureVector()) == 0.5
        m.bias = -0.2
        assert predict_proba(m, FeatureVector()) == pytest.approx(0.450166, abs=1e-6)
        m.bias = 100.0
        assert predict_proba(m, FeatureVector()) == 1 - 1e-6

    def test_matches_python_oracle_on_untouched_latents(self):
        cfg = TrainConfig(k=3, seed=11, init_scale=0.7)
        schema = FieldSchema.build(["a", "b"], ["c"])
        m = init_model(schema, cfg)
        entries = [(0, 5, 1.0), (1, 17, 0.5), (2, 99, 2.0)]
        expected = _oracle.ffm_logit(
            0.0, {}, lambda i, f: _oracle.init_latent(11, i, f, 3, 0.7), entries
        )
        assert predict_logit(m, FeatureVector(entries)) == pytest.approx(expected, rel=1e-13)

    def test_latent_init_bounds_and_oracle(self):
        m = init_model(FieldSchema.build(["a", "b"]), TrainConfig(k=4, seed=5, init_scale=0.1))
        v = m.latent_vector(123, 1)
        assert np.all(v >= 0) and np.all(v <= 0.1 / 2)
        np.testing.assert_array_equal(v, _oracle.init_latent(5, 123, 1, 4, 0.1))

    def test_seed_changes_initialisation(self):
        s = FieldSchema.build(["a", "b"])
        v1 = init_model(s, TrainConfig(seed=1)).latent_vector(42, 1)
        v2 = init_model(s, TrainConfig(seed=2)).latent_vector(42, 1)
        assert not np.array_equal(v1, v2)

    def test_first_touch_matches_lazy_read(self):
        m = two_field_model(seed=3)
        before = m.latent_vector(8, 1)
        m.ensure_slots([8])
        np.testing.assert_array_equal(m.latent_vector(8, 1), before)

    def test_prediction_is_pure(self):
        m = two_field_model()
        fv = FeatureVector([(0, 3), (1, 4)])
        digest = m.state_digest()
        first = predict_logit(m, fv)
        for _ in range(5):
            assert predict_logit(m, fv) == first
            predict_proba(m, fv)
        assert m.state_digest() == digest
        assert m.n_slots == 0

    @given(st.permutations([(0, 3, 1.0), (1, 4, 0.5), (2, 9, 2.0), (0, 8, 1.0)]))
    def test_permutation_invariance(self, entries):
        m = init_model(FieldSchema.build(["a", "b"], ["c"]), TrainConfig(seed=4))
        ref = predict_logit(m, FeatureVector(sorted(entries)))
        assert predict_logit(m, FeatureVector(entries)) == ref


class TestUpdate:
    def test_hand_adagrad_step(self):
        m = two_field_model(learning_rate=0.1)
        p = update(m, FeatureVector(), 1)
        assert p == 0.5
        assert m.accumulators()["bias"][0] == pytest.approx(0.25)
        assert m.bias == pytest.approx(0.1, abs=1e-9)
        assert m.update_count == 1

    def test_returns_pre_update_prediction(self):
        m = two_field_model()
        fv = FeatureVector([(0, 1), (1, 2)])
        before = predict_proba(m, fv)
        assert update(m, fv, 1) == before
        assert predict_proba(m, fv) > before

    def test_saturated_gradient_is_bounded(self):
        m = two_field_model(learning_rate=0.1)
        m.bias = 100.0
        fv = FeatureVector([(0, 1), (1, 2)])
        g = gradient(m, fv, 1)
        bound = 1e-6 * (1 + 1e-9)  # 1 - (1 - eps) is not exactly eps in binary
        assert abs(g["bias"]) <= bound
        assert abs(g[("w", 1)]) <= bound and abs(g[("w", 2)]) <= bound
        snap = m.snapshot()
        update(m, fv, 1)
        assert abs(m.bias - snap.bias) <= 0.1
        assert abs(m.linear_weight(1) - snap.linear_weight(1)) <= 0.1

    def test_bias_is_not_regularised(self):
        m = two_field_model(l2=10.0)
        m.bias = 2.0
        g = gradient(m, FeatureVector(), 1)
        assert g["bias"] == pytest.approx(1 / (1 + math.exp(-2.0)) - 1)

    @pytest.mark.parametrize("label", [2, -1, 0.5, "1"])
    def test_non_binary_label(self, label):
        with pytest.raises(InputError):
            update(two_field_model(), FeatureVector(), label)

    def test_intercept_calibration(self):
        rng = np.random.default_rng(0)
        m = two_field_model()
        for y in (rng.random(50_000) < 0.2).astype(int):
            update(m, FeatureVector(), int(y))
        assert abs(predict_proba(m, FeatureVector()) - 0.2) <= 0.02

    def test_determinism(self):
        rng = np.random.default_rng(1)
        stream = [
            (FeatureVector([(0, int(rng.integers(20))), (1, int(rng.integers(20)))]), int(rng.integers(2)))
            for _ in range(300)
        ]
        digests, preds = [], []
        for _ in range(2):
            m = two_field_model(seed=9)
            preds.append([update(m, fv, y) for fv, y in stream])
            digests.append(m.state_digest())
        assert preds[0] == preds[1]
        assert digests[0] == digests[1]

    def test_snapshot_is_read_only_and_isolated(self):
        m = two_field_model()
        fv = FeatureVector([(0, 1)])
        snap = m.snapshot()
        with pytest.raises(InputError):
            update(snap, fv, 1)
        update(m, fv, 1)
        assert predict_logit(snap, fv) != predict_logit(m, fv)


class TestGradient:
    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        assert _oracle.fd_gradient_error(seed) < 1e-4

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=100, max_value=2**32))
    def test_finite_differences_property(self, seed):
        assert _oracle.fd_gradient_error(seed) < 1e-4

    def test_gradient_does_not_change_weights(self):
        m = two_field_model()
        fv = FeatureVector([(0, 1), (1, 2)])
        before = predict_logit(m, fv)
        gradient(m, fv, 1)
        assert predict_logit(m, fv) == before


class TestFlops:
    @pytest.mark.parametrize(
        "n, k, expected",
        [(0, 4, 4), (1, 1, 6), (1, 16, 6), (3, 4, 40), (10, 4, 474), (7, 4, 228), (11, 4, 576)],
    )
    def test_examples(self, n, k, expected):
        assert count_flops(n, k) == expected

    def test_lr_has_no_pair_cost(self):
        assert count_flops(10, 4, interactions=False) == 24

    def test_change_example(self):
        assert (count_flops(7, 4) - count_flops(10, 4)) / count_flops(10, 4) * 100 == pytest.approx(-51.9, abs=0.05)

    @given(st.integers(1, 200), st.integers(1, 64))
    def test_monotone(self, n, k):
        assert count_flops(n + 1, k) > count_flops(n, k)
        if n >= 2:
            assert count_flops(n, k + 1) > count_flops(n, k)

    def test_invalid(self):
        with pytest.raises(InputError):
            count_flops(-1, 4)
        with pytest.raises(InputError):
            count_flops(2, 0)


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path):
        rng = np.random.default_rng(2)
        m = init_model(FieldSchema.build(["a", "b"], ["c"]), TrainConfig(seed=6))
        fvs = [FeatureVector([(j, int(rng.integers(50))) for j in range(3)]) for _ in range(200)]
        for fv in fvs:
            update(m, fv, int(rng.integers(2)))
        path = tmp_path / "m.ckpt"
        m.save(path)
        loaded = FfmModel.load(path)
        assert loaded.state_digest() == m.state_digest()
        probe = fvs + [FeatureVector([(0, 999), (2, 998)])]
        assert [predict_proba(loaded, fv) for fv in probe] == [predict_proba(m, fv) for fv in probe]
        # training continues identically after reload
        assert update(loaded, fvs[0], 1) == update(m, fvs[0], 1)
        assert loaded.state_digest() == m.state_digest()

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            FfmModel.load(p)
