import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privface import aspe
from privface.aspe import (AspeKey, DimensionError, EncDataVector, EncQueryVector, KeyPurposeError,
                           encrypt_data, encrypt_query, keygen, secure_inner, split_data, split_query)
from privface.binio import FormatError, VersionError

import oracles


def identity_key(dim, split):
    eye = np.eye(dim)
    return AspeKey.from_matrices(eye, eye, split)


class TestKeygen:
    def test_smallest_dimension(self):
        k = keygen(1, 3)
        assert k.mat1.shape == (1, 1) and k.mat1[0, 0] != 0 and k.mat2[0, 0] != 0
        assert k.split[0] in (0, 1)

    @pytest.mark.parametrize("dim", [2, 17, 576])
    def test_inverse_and_condition(self, dim):
        k = keygen(dim, 11)
        eye = np.eye(dim)
        # inverse oracle: numpy's general-purpose inverse, not the cached one
        assert np.max(np.abs(k.mat1 @ k.mat1_inv - eye)) <= 1e-9
        assert np.max(np.abs(k.mat2 @ k.mat2_inv - eye)) <= 1e-9
        assert np.allclose(np.linalg.inv(k.mat1), k.mat1_inv, atol=1e-9)
        assert np.linalg.cond(k.mat1) <= aspe.COND_BOUND + 1e-9
        assert np.linalg.cond(k.mat2) <= aspe.COND_BOUND + 1e-9
        assert len(k.split) == dim

    def test_seeds(self):
        assert keygen(5, 1) == keygen(5, 1)
        a, b = keygen(5, 1), keygen(5, 2)
        assert not np.array_equal(a.mat1, b.mat1) or not np.array_equal(a.mat2, b.mat2)

    def test_split_bits_look_fair(self):
        bits = np.concatenate([keygen(20, seed).split for seed in range(200)])
        assert 0.45 < bits.mean() < 0.55

    def test_rejects_zero_dim(self):
        with pytest.raises(ValueError):
            keygen(0, 1)

    def test_key_is_immutable(self):
        k = keygen(3, 1)
        with pytest.raises(ValueError):
            k.mat1[0, 0] = 5.0


class TestSplit:
    def test_equal_component(self):
        a, b = split_data([3.0], [1], noise=[0.7])
        assert a.tolist() == [3.0] and b.tolist() == [3.0]

    def test_random_component(self):
        a, b = split_data([4.0], [0], noise=[1.5])
        assert a.tolist() == [0.5] and b.tolist() == [3.5]

    def test_query_rule_is_dual(self):
        a, b = split_query([3.0], [0], noise=[9.0])
        assert a.tolist() == [3.0] and b.tolist() == [3.0]
        a, b = split_query([4.0], [1], noise=[0.25])
        assert a.tolist() == [1.75] and b.tolist() == [2.25]

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            split_data([1.0, 2.0], [1])
        with pytest.raises(DimensionError):
            split_query([1.0], [1, 0])

    def test_noise_is_fresh_and_scaled(self):
        rng = np.random.default_rng(0)
        v = np.full(1000, 3.0)
        a, _ = split_data(v, np.zeros(1000, dtype=int), rng)
        r = v / 2 - a
        assert np.all(np.abs(r) <= 4.0) and len(np.unique(r)) == 1000

    def test_matches_rational_oracle(self):
        rnd = random.Random(4)
        for _ in range(100):
            n = rnd.randint(1, 8)
            v = oracles.rational_vector(rnd, n)
            split = [rnd.randint(0, 1) for _ in range(n)]
            noise = oracles.rational_vector(rnd, n)
            for side, fn in ((True, split_data), (False, split_query)):
                got = fn(np.array(v, dtype=object), split, noise=np.array(noise, dtype=object))
                want = oracles.exact_split(v, split, noise, data_side=side)
                assert [list(g) for g in got] == [list(w) for w in want]

    def test_split_sum_property_exact(self):
        rnd = random.Random(9)
        for _ in range(200):
            n = rnd.randint(1, 8)
            v = np.array(oracles.rational_vector(rnd, n), dtype=object)
            split = [rnd.randint(0, 1) for _ in range(n)]
            a, b = split_data(v, split, noise=np.array(oracles.rational_vector(rnd, n), dtype=object))
            for j in range(n):
                if split[j] == 0:
                    assert a[j] + b[j] == v[j]


class TestEncrypt:
    def test_identity_key_all_ones(self):
        k = identity_key(3, [1, 1, 1])
        e = encrypt_data(k, [1.0, -2.0, 5.0], 0)
        assert e.part1.tolist() == [1.0, -2.0, 5.0] and e.part2.tolist() == [1.0, -2.0, 5.0]

    def test_zero_vector(self):
        k = keygen(4, 2)
        k = AspeKey(k.mat1, k.mat2, k.mat1_inv, k.mat2_inv, np.ones(4, dtype=np.uint8))
        e = encrypt_data(k, np.zeros(4), 0)
        assert np.all(e.part1 == 0) and np.all(e.part2 == 0)

    def test_identity_query_all_zeros(self):
        k = identity_key(2, [0, 0])
        e = encrypt_query(k, [7.0, 8.0], 1)
        assert e.part1.tolist() == [7.0, 8.0] and e.part2.tolist() == [7.0, 8.0]

    def test_no_decrypt_api(self):
        public = [n for n in dir(aspe) if not n.startswith("_")]
        assert not any("decrypt" in n.lower() for n in public)

    def test_query_freshness(self):
        k = keygen(6, 3)
        assert k.split.any()
        rng = np.random.default_rng(1)
        a, b = encrypt_query(k, np.ones(6), rng), encrypt_query(k, np.ones(6), rng)
        assert a != b

    def test_dimension_errors(self):
        k = keygen(3, 0)
        with pytest.raises(DimensionError):
            encrypt_data(k, [1.0, 2.0])
        with pytest.raises(DimensionError):
            encrypt_query(k, [1.0, 2.0, 3.0, 4.0])
        with pytest.raises(DimensionError):
            secure_inner(encrypt_data(k, [1, 2, 3]), encrypt_query(keygen(2, 0), [1, 2]))

    def test_side_confusion_rejected(self):
        k = keygen(3, 0)
        d, q = encrypt_data(k, [1, 2, 3]), encrypt_query(k, [1, 2, 3])
        with pytest.raises(TypeError):
            secure_inner(q, d)


class TestSecureInner:
    def test_orthogonal(self):
        k = keygen(2, 8)
        assert abs(secure_inner(encrypt_data(k, [1, 0], 1), encrypt_query(k, [0, 1], 2))) <= 1e-8

    def test_hand_dot(self):
        k = keygen(3, 8)
        got = secure_inner(encrypt_data(k, [1, 2, 3], 1), encrypt_query(k, [4, 5, 6], 2))
        assert abs(got - 32) <= 1e-8 * 33

    @pytest.mark.parametrize("dim", [5, 64, 576])
    def test_random_pairs(self, dim):
        rng = np.random.default_rng(dim)
        k = keygen(dim, rng)
        y, w = rng.standard_normal((2, 200, dim))
        eys, ews = aspe.encrypt_data_many(k, y, rng), aspe.encrypt_query_many(k, w, rng)
        for yi, wi, ey, ew in zip(y, w, eys, ews):
            dot = oracles.float_dot(yi, wi)
            assert abs(secure_inner(ey, ew) - dot) <= 1e-8 * (1 + abs(dot))

    def test_single_and_batch_agree(self):
        k = keygen(7, 1)
        v = np.arange(7.0)
        a = encrypt_data(k, v, np.random.default_rng(3))
        b = aspe.encrypt_data_many(k, v[None], np.random.default_rng(3))[0]
        assert a == b

    def test_matrix_cancellation(self):
        rng = np.random.default_rng(2)
        for dim in (1, 3, 50):
            m, m_inv = aspe.random_invertible(dim, rng)
            a, b = rng.standard_normal((2, dim))
            ab = a @ b
            assert abs((m.T @ a) @ (m_inv @ b) - ab) <= 1e-9 * (1 + abs(ab))

    def test_cross_key_nonsense(self):
        rng = np.random.default_rng(5)
        k1, k2 = keygen(16, rng), keygen(16, rng)
        errs = []
        for _ in range(200):
            y, w = rng.standard_normal((2, 16))
            dot = y @ w
            got = secure_inner(encrypt_data(k1, y, rng), encrypt_query(k2, w, rng))
            errs.append(abs(got - dot) / (1 + abs(dot)))
        assert np.mean(errs) > 0.1

    def test_determinism(self):
        k1, k2 = keygen(9, 42), keygen(9, 42)
        v = np.linspace(-1, 1, 9)
        assert encrypt_data(k1, v, 7) == encrypt_data(k2, v, 7)
        assert encrypt_query(k1, v, 7) == encrypt_query(k2, v, 7)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 2**32 - 1),
           st.floats(1e-3, 1e3))
    def test_preservation_property(self, dim, seed, scale):
        rng = np.random.default_rng(seed)
        k = keygen(dim, rng)
        y, w = rng.standard_normal((2, dim)) * scale
        dot = oracles.float_dot(y, w)
        got = secure_inner(encrypt_data(k, y, rng), encrypt_query(k, w, rng))
        assert abs(got - dot) <= 1e-8 * (1 + abs(dot))


class TestKeyFile:
    def test_round_trip(self, tmp_path):
        k = keygen(13, 4, purpose="matching")
        p = tmp_path / "k.aspe"
        aspe.save_key(k, p)
        loaded = aspe.load_key(p)
        assert loaded == k and loaded.purpose == "matching"
        assert p.read_bytes()[:4] == b"ASPE"

    def test_layout(self):
        k = keygen(9, 4)
        raw = aspe.key_to_bytes(k)
        assert len(raw) == 4 + 2 + 4 + 1 + 2 + 4 * 81 * 8
        assert int.from_bytes(raw[4:6], "little") == aspe.KEY_VERSION
        assert int.from_bytes(raw[6:10], "little") == 9

    def test_errors(self):
        raw = aspe.key_to_bytes(keygen(4, 0))
        with pytest.raises(FormatError, match="bad magic"):
            aspe.key_from_bytes(b"")
        with pytest.raises(FormatError, match="truncated"):
            aspe.key_from_bytes(raw[:-3])
        with pytest.raises(VersionError):
            aspe.key_from_bytes(raw[:4] + b"\x09\x00" + raw[6:])

    def test_purpose_tag(self):
        k = keygen(3, 0, purpose="detector")
        k.require("detector")
        with pytest.raises(KeyPurposeError):
            k.require("matching")


class TestCiphertextBytes:
    def test_round_trip_and_kind(self):
        k = keygen(5, 0)
        d, q = encrypt_data(k, np.ones(5), 1), encrypt_query(k, np.ones(5), 1)
        assert EncDataVector.from_bytes(d.to_bytes()) == d
        assert EncQueryVector.from_bytes(q.to_bytes()) == q
        assert d.to_bytes()[0] == 0x01 and q.to_bytes()[0] == 0x02
        with pytest.raises(FormatError):
            EncQueryVector.from_bytes(d.to_bytes())
