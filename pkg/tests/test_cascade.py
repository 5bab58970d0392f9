import numpy as np
import pytest

from privface import cascade
from privface.aspe import AspeKey, DimensionError, KeyPurposeError, encrypt_query, keygen
from privface.binio import FormatError, VersionError
from privface.cascade import (CascadeModel, CascadeStage, DetectionOutcome, WeakClassifier,
                              encrypt_detector, eval_cascade_plain, eval_cascade_secure,
                              eval_cascade_secure_many, eval_stage_plain, eval_weak_plain,
                              random_normalized_windows, synth_cascade)

import oracles


def as_tuples(model):
    return [[(w.hyperplane, w.alpha, w.beta, w.theta) for w in s.weak_classifiers] for s in model.stages]


def const_weak(dim, vote, other):
    # hyperplane zero, theta below zero: always fires under >=
    return WeakClassifier(np.zeros(dim), vote, other, -1.0)


@pytest.fixture(scope="module")
def small_setup():
    rng = np.random.default_rng(123)
    model = synth_cascade([2, 5, 3, 8, 4, 6], window_edge=4, rng=rng)
    key = keygen(16, rng, purpose="detector")
    return model, key, encrypt_detector(key, model, rng), rng


class TestWeak:
    def test_above(self):
        wc = WeakClassifier([1, 1], 2, -1, 1)
        assert eval_weak_plain(wc, [1, 1]) == 2

    def test_boundary_strict_is_otherwise(self):
        wc = WeakClassifier([1, 1], 2, -1, 1)
        assert eval_weak_plain(wc, [0.5, 0.5], inclusive=False) == -1
        # default convention is >=, shared with the secure path
        assert eval_weak_plain(wc, [0.5, 0.5]) == 2

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            h, x = rng.standard_normal((2, 9))
            a, b, t = rng.standard_normal(3)
            wc = WeakClassifier(h, a, b, t)
            for inc in (True, False):
                assert eval_weak_plain(wc, x, inc) == oracles.weak_vote(h, a, b, t, x, inc)

    def test_constant_classifier_rejected(self):
        with pytest.raises(ValueError):
            WeakClassifier([1.0], 1.0, 1.0, 0.0)

    def test_dimension(self):
        with pytest.raises(DimensionError):
            eval_weak_plain(WeakClassifier([1, 1], 1, -1, 0), [1, 2, 3])


class TestStage:
    def test_single_accepting(self):
        assert eval_stage_plain(CascadeStage((const_weak(2, 1.0, -1.0),)), [0, 0]) == (True, 1.0)

    def test_sum_rejects(self):
        stage = CascadeStage((const_weak(2, 1.0, -1.0), const_weak(2, -2.0, 1.0)))
        assert eval_stage_plain(stage, [0, 0]) == (False, -1.0)

    def test_random_vs_oracle(self, small_setup):
        model, *_ = small_setup
        xs = random_normalized_windows(100, 16, 1)
        for stage, tuples in zip(model.stages, as_tuples(model)):
            for x in xs:
                ok, score = eval_stage_plain(stage, x)
                want = oracles.stage_sum(tuples, x)
                assert score == pytest.approx(want, abs=1e-12) and ok == (want >= 0)

    def test_empty_stage(self):
        with pytest.raises(ValueError):
            CascadeStage(())


class TestCascadePlain:
    def test_all_accept(self):
        m = CascadeModel(1, [CascadeStage((const_weak(1, 1.0, -1.0),))] * 3)
        out = eval_cascade_plain(m, [0.0])
        assert out.accepted and out.rejected_at_stage is None and len(out.stage_scores) == 3

    def test_first_rejects(self):
        m = CascadeModel(1, [CascadeStage((const_weak(1, -1.0, 1.0),)),
                             CascadeStage((const_weak(1, 1.0, -1.0),))])
        out = eval_cascade_plain(m, [0.0])
        assert not out.accepted and out.rejected_at_stage == 0 and len(out.stage_scores) == 1

    def test_vs_exhaustive_oracle(self):
        rng = np.random.default_rng(8)
        # few, small stages so a decent fraction of windows pass
        model = synth_cascade([3, 1, 2], window_edge=3, rng=rng)
        tuples = as_tuples(model)
        xs = random_normalized_windows(500, 9, rng)
        accepted = 0
        for x in xs:
            out = eval_cascade_plain(model, x)
            acc, first = oracles.cascade_all_stages(tuples, x)
            assert (out.accepted, out.rejected_at_stage) == (acc, first)
            accepted += acc
        assert 0 < accepted < 500

    def test_outcome_invariant(self):
        with pytest.raises(ValueError):
            DetectionOutcome(True, 2, (1.0,))

    def test_model_dims(self):
        with pytest.raises(DimensionError):
            CascadeModel(2, [CascadeStage((WeakClassifier([1, 2, 3], 1, -1, 0),))])
        with pytest.raises(ValueError):
            CascadeModel(2, [])


class TestEncryptDetector:
    def test_identity_key(self):
        model = synth_cascade([2, 3], window_edge=2, rng=0)
        eye = np.eye(4)
        key = AspeKey.from_matrices(eye, eye, np.ones(4, dtype=np.uint8))
        enc = encrypt_detector(key, model, 1)
        for s, es in zip(model.stages, enc.stages):
            for w, ew in zip(s.weak_classifiers, es):
                assert np.array_equal(ew.enc_hyperplane.part1, w.hyperplane)
                assert np.array_equal(ew.enc_hyperplane.part2, w.hyperplane)

    def test_identity_key_responses_exact(self):
        model = synth_cascade([4], window_edge=3, rng=0)
        eye = np.eye(9)
        key = AspeKey.from_matrices(eye, eye, np.array([1, 0] * 4 + [1]))
        enc = encrypt_detector(key, model, 1)
        x = random_normalized_windows(1, 9, 2)[0]
        t = cascade.secure_responses(enc, encrypt_query(key, x, 3))
        plain = [x @ w.hyperplane for w in model.stages[0].weak_classifiers]
        assert np.max(np.abs(np.array(t) - plain)) <= 1e-12

    def test_structure_preserved(self, small_setup):
        model, _, enc, _ = small_setup
        assert [len(s) for s in enc.stages] == [len(s) for s in model.stages]
        for s, es in zip(model.stages, enc.stages):
            assert [(w.alpha, w.beta, w.theta) for w in s.weak_classifiers] == \
                [(e.alpha, e.beta, e.theta) for e in es]

    def test_fresh(self, small_setup):
        model, key, enc, _ = small_setup
        again = encrypt_detector(key, model, 999)
        assert not key.split.all()
        assert enc.stages[0][0].enc_hyperplane != again.stages[0][0].enc_hyperplane

    def test_key_checks(self, small_setup):
        model, *_ = small_setup
        with pytest.raises(DimensionError):
            encrypt_detector(keygen(9, 0), model)
        with pytest.raises(KeyPurposeError):
            encrypt_detector(keygen(16, 0, purpose="matching"), model)


class TestSecure:
    def test_equivalence_and_scores(self, small_setup):
        model, key, enc, rng = small_setup
        xs = random_normalized_windows(400, 16, rng)
        ews = [encrypt_query(key, x, rng) for x in xs]
        all_h = np.stack([w.hyperplane for s in model.stages for w in s.weak_classifiers])
        all_theta = np.array([w.theta for s in model.stages for w in s.weak_classifiers])
        batch = eval_cascade_secure_many(enc, ews)
        checked = 0
        for x, ew, b in zip(xs, ews, batch):
            if np.min(np.abs(all_h @ x - all_theta)) <= 1e-6:
                continue
            checked += 1
            plain = eval_cascade_plain(model, x)
            sec = eval_cascade_secure(enc, ew)
            assert sec == b
            assert sec.accepted == plain.accepted
            assert sec.rejected_at_stage == plain.rejected_at_stage
            for a, p in zip(sec.stage_scores, plain.stage_scores):
                assert abs(a - p) <= 1e-8 * (1 + abs(p))
        assert checked > 350

    def test_trace_leakage_profile(self, small_setup):
        model, key, enc, rng = small_setup
        x = random_normalized_windows(1, 16, rng)[0]
        trace = []
        out = eval_cascade_secure(enc, encrypt_query(key, x, rng), trace)
        assert len(trace) == len(out.stage_scores)
        for k, rec in enumerate(trace):
            assert set(rec) == {"stage", "t", "h", "score", "accepted"}
            assert rec["stage"] == k and len(rec["t"]) == len(rec["h"]) == len(enc.stages[k])
            allowed = {e.alpha for e in enc.stages[k]} | {e.beta for e in enc.stages[k]}
            assert set(rec["h"]) <= allowed
        plain_x = set(x.tolist())
        for rec in trace:
            assert not plain_x & set(rec["t"])

    def test_wrong_side_or_dim(self, small_setup):
        _, key, enc, _ = small_setup
        with pytest.raises(DimensionError):
            eval_cascade_secure(enc, encrypt_query(keygen(9, 1), np.zeros(9)))
        with pytest.raises(TypeError):
            eval_cascade_secure(enc, cascade.encrypt_data_many(key, np.zeros((1, 16)))[0])

    def test_empty_batch(self, small_setup):
        assert eval_cascade_secure_many(small_setup[2], []) == []


class TestSynth:
    def test_frontal_shape(self):
        sizes = cascade.FRONTAL_STAGE_SIZES
        assert len(sizes) == 22 and sizes[0] == 3 and max(sizes) == 213 and sum(sizes) == 2135

    def test_minimal(self):
        m = synth_cascade([1], window_edge=2, rng=0)
        assert m.dim == 4 and m.n_weak == 1

    def test_properties(self):
        m = synth_cascade([50], window_edge=5, rng=3)
        for w in m.stages[0].weak_classifiers:
            assert w.alpha > 0 > w.beta
            assert abs(np.linalg.norm(w.hyperplane) - 1) < 1e-12
        # thresholds at the median: each classifier fires on about half of fresh windows
        xs = random_normalized_windows(2000, 25, 4)
        rates = [(xs @ w.hyperplane >= w.theta).mean() for w in m.stages[0].weak_classifiers]
        assert 0.4 < np.mean(rates) < 0.6

    def test_seeds(self):
        assert synth_cascade([2], 3, 1) == synth_cascade([2], 3, 1)
        assert synth_cascade([2], 3, 1) != synth_cascade([2], 3, 2)

    def test_errors(self):
        with pytest.raises(ValueError):
            synth_cascade([], 3, 0)
        with pytest.raises(ValueError):
            cascade.parse_stage_sizes("3,,x")
        assert cascade.parse_stage_sizes("3, 16,21") == [3, 16, 21]
        assert sum(cascade.parse_stage_sizes("frontal")) == 2135


class TestFiles:
    def test_round_trip_frontal_shape(self, tmp_path):
        m = synth_cascade(cascade.FRONTAL_STAGE_SIZES, 24, 5)
        p = tmp_path / "m.casc"
        cascade.save_model(m, p)
        assert cascade.load_model(p) == m

    def test_layout(self):
        m = synth_cascade([2, 1], 2, 0)
        raw = cascade.model_to_bytes(m)
        assert raw[:4] == b"CASC"
        assert len(raw) == 4 + 2 + 2 + 2 + 2 * 4 + 3 * (4 + 3) * 8

    def test_truncated_and_empty(self):
        raw = cascade.model_to_bytes(synth_cascade([2, 1], 2, 0))
        for cut in (5, 11, 20, len(raw) - 1):
            with pytest.raises(FormatError) as ei:
                cascade.model_from_bytes(raw[:cut])
            assert ei.value.offset is not None
        with pytest.raises(FormatError, match="bad magic"):
            cascade.model_from_bytes(b"")

    def test_version(self):
        raw = cascade.model_to_bytes(synth_cascade([1], 2, 0))
        with pytest.raises(VersionError):
            cascade.model_from_bytes(raw[:4] + b"\x02\x00" + raw[6:])

    def test_encrypted_round_trip(self, small_setup, tmp_path):
        enc = small_setup[2]
        p = tmp_path / "e.ecas"
        cascade.save_encrypted_detector(enc, p)
        assert cascade.load_encrypted_detector(p) == enc
        with pytest.raises(FormatError):
            cascade.encrypted_detector_from_bytes(p.read_bytes()[:-8])
