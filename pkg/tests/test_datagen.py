import json
import logging
from dataclasses import replace

import numpy as np
import pytest

from ctxctr.core_model import FieldSchema
from ctxctr.datagen import (
    EncodedLog,
    ImpressionRecord,
    ScoringRequest,
    SyntheticConfig,
    feature_index,
    fnv1a64,
    generate,
    group_requests,
    infer_schema,
    read_log,
    vectorize,
    write_log,
)
from ctxctr.errors import ConfigError, GenerationError, LogParseError, SchemaMismatchError

import _oracle

SMALL = SyntheticConfig(n_requests=2_000, cardinality=30, seed=3)


class TestHashing:
    @pytest.mark.parametrize(
        "data, expected",
        [
            # published FNV-1a 64 test vectors
            (b"", 0xCBF29CE484222325),
            (b"a", 0xAF63DC4C8601EC8C),
            (b"foobar", 0x85944171F73967E8),
        ],
    )
    def test_reference_vectors(self, data, expected):
        assert fnv1a64(data) == expected

    def test_golden_index(self):
        # frozen after cross-checking with a numpy uint64 implementation
        assert feature_index("geo", "US", 18) == 199295

    def test_separator_prevents_aliasing(self):
        assert feature_index("ab", "c", 30) != feature_index("a", "bc", 30)

    def test_same_pair_same_index(self):
        assert feature_index("geo", "FR", 12) == feature_index("geo", "FR", 12)

    def test_small_space_collides_without_error(self):
        idx = {feature_index("f", str(v), 8) for v in range(10_000)}
        assert idx <= set(range(256))
        assert len(idx) < 10_000


class TestGenerator:
    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(base_ctr=1.0)
        with pytest.raises(ConfigError):
            SyntheticConfig(candidates_per_request=0)
        with pytest.raises(ConfigError):
            SyntheticConfig(beta_int=-0.1)

    def test_no_effects_gives_constant_true_p(self):
        cfg = replace(SMALL, beta_ctx=0.0, beta_item=0.0, beta_int=0.0)
        log = generate(cfg)
        assert np.ptp(log.true_p) == 0.0
        assert abs(log.true_p[0] - 0.2) <= 0.005

    def test_empirical_ctr(self):
        log = generate(SyntheticConfig(n_requests=20_000, seed=1))
        assert len(log) == 80_000
        assert 0.185 <= log.clicks.mean() <= 0.215

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_log(generate(SMALL), a)
        write_log(generate(SMALL), b)
        assert a.read_bytes() == b.read_bytes()
        write_log(generate(replace(SMALL, seed=4)), b)
        assert a.read_bytes() != b.read_bytes()

    def test_requests_share_context(self):
        recs = list(generate(SMALL))
        reqs = list(group_requests(recs))
        assert len(reqs) == SMALL.n_requests
        assert all(len(r.candidates) == SMALL.candidates_per_request for r in reqs)
        by_id = {}
        for rec in recs:
            by_id.setdefault(rec.request_id, []).append(rec.context)
        assert all(all(c == cs[0] for c in cs) for cs in by_id.values())

    def test_timestamps_non_decreasing(self):
        ts = [r.ts for r in generate(SMALL)]
        assert ts == sorted(ts)

    def test_calibration_failure(self):
        with pytest.raises(GenerationError):
            generate(replace(SMALL, beta_ctx=400.0, base_ctr=0.001))

    def test_planted_context_signal(self):
        cfg = SyntheticConfig(n_requests=25_000, beta_ctx=1.0, beta_item=0.0, beta_int=0.0, seed=2)
        log = generate(cfg)
        assert _oracle.brute_rig(log.clicks.tolist(), log.true_p.tolist()) >= 0.05

    def test_no_signal_oracle_rig(self):
        cfg = SyntheticConfig(n_requests=25_000, beta_ctx=0.0, beta_item=0.0, beta_int=0.0, seed=2)
        log = generate(cfg)
        assert _oracle.brute_rig(log.clicks.tolist(), log.true_p.tolist()) <= 0.001

    def test_encode_matches_record_hashing(self):
        log = generate(SMALL)
        enc = log.encode(14)
        from_recs = EncodedLog.from_records(list(log), 14)
        np.testing.assert_array_equal(enc.ctx_idx, from_recs.ctx_idx)
        np.testing.assert_array_equal(enc.item_idx, from_recs.item_idx)
        np.testing.assert_array_equal(enc.req_offsets, from_recs.req_offsets)
        np.testing.assert_array_equal(enc.labels, from_recs.labels)


def _record(**kw):
    base = {"ts": 1, "request_id": "r1", "context": {"geo": "US"}, "item": {"ad": "7"}, "click": 0}
    base.update(kw)
    return base


class TestLogIO:
    def test_round_trip(self, tmp_path):
        recs = list(generate(SMALL))[:50]
        p = tmp_path / "log.jsonl"
        assert write_log(recs, p) == 50
        back = list(read_log(p))
        assert back == recs

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        assert list(read_log(p)) == []

    def test_single_line(self, tmp_path):
        p = tmp_path / "one.jsonl"
        p.write_text(json.dumps(_record()) + "\n")
        (rec,) = read_log(p)
        assert rec == ImpressionRecord(1, "r1", {"geo": "US"}, {"ad": "7"}, 0)

    @pytest.mark.parametrize(
        "bad",
        [
            _record(click=2),
            _record(click=True),
            _record(extra=1),
            {k: v for k, v in _record().items() if k != "ts"},
            _record(context={"geo": 1}),
        ],
    )
    def test_domain_errors_name_the_line(self, tmp_path, bad):
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps(_record()) + "\n" + json.dumps(bad) + "\n")
        with pytest.raises(LogParseError) as exc:
            list(read_log(p))
        assert exc.value.line_no == 2
        assert str(exc.value).startswith("line 2:")

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text("{not json\n")
        with pytest.raises(LogParseError, match="line 1"):
            list(read_log(p))

    def test_out_of_order_ts(self, tmp_path, caplog):
        p = tmp_path / "ts.jsonl"
        p.write_text(json.dumps(_record(ts=5)) + "\n" + json.dumps(_record(ts=4)) + "\n")
        with pytest.raises(LogParseError, match="line 2"):
            list(read_log(p, strict=True))
        with caplog.at_level(logging.WARNING):
            assert len(list(read_log(p))) == 2
        assert "precedes" in caplog.text


class TestVectorize:
    def test_record_and_request(self):
        schema = FieldSchema.build(["geo"], ["ad"])
        rec = ImpressionRecord(1, "r", {"geo": "US"}, {"ad": "7"}, 1)
        fv = vectorize(rec, schema, 18)
        assert fv.entries == ((0, 199295, 1.0), (1, feature_index("ad", "7", 18), 1.0))
        req = ScoringRequest("r", {"geo": "US"}, [{"ad": "7"}, {"ad": "8"}])
        fvs = vectorize(req, schema, 18)
        assert len(fvs) == 2 and fvs[0] == fv

    def test_unknown_field(self):
        schema = FieldSchema.build(["geo"], ["ad"])
        with pytest.raises(SchemaMismatchError):
            vectorize(ImpressionRecord(1, "r", {"city": "x"}, {"ad": "7"}, 1), schema, 18)

    def test_infer_schema_empty(self):
        with pytest.raises(SchemaMismatchError):
            infer_schema([])
