import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cipherbreak.rng import (
    MasterKey,
    derive_epoch_key,
    derive_stream,
    gen_bits,
    gen_choice,
    gen_choices,
    gen_permutation,
    read_key_file,
    write_key_file,
)

from util import key_from_int

KEY = key_from_int(1)
OTHER_KEY = key_from_int(2)


def test_master_key_length_enforced():
    with pytest.raises(ValueError):
        MasterKey(b"short")
    with pytest.raises(ValueError):
        MasterKey(b"\x00" * 33)


def test_fingerprint_hides_key_bytes():
    fp = KEY.fingerprint()
    assert len(fp) == 16
    assert fp not in KEY.hex()
    assert "MasterKey" in repr(KEY) and KEY.hex() not in repr(KEY)


def test_key_file_round_trip(tmp_path):
    path = tmp_path / "k.key"
    write_key_file(path, KEY)
    assert read_key_file(path).data == KEY.data
    bad = tmp_path / "bad.key"
    bad.write_text("not-a-key\nabcd\n")
    with pytest.raises(ValueError):
        read_key_file(bad)


def test_same_stream_is_deterministic():
    a = derive_stream(KEY, "K1").take_bytes(8000)
    b = derive_stream(KEY, "K1").take_bytes(8000)
    assert a == b


def test_labels_separate_streams():
    a = derive_stream(KEY, "K1")._u64(16)
    b = derive_stream(KEY, "K2")._u64(16)
    assert np.any(a != b)


def test_keys_separate_streams():
    a = derive_stream(KEY, "K1")._u64(16)
    b = derive_stream(OTHER_KEY, "K1")._u64(16)
    assert np.any(a != b)


def test_tweak_separates_streams():
    a = derive_stream(KEY, "K1", tweak=0).take_bytes(64)
    b = derive_stream(KEY, "K1", tweak=1).take_bytes(64)
    c = derive_stream(KEY, "K1").take_bytes(64)
    assert len({a, b, c}) == 3


def test_unknown_label_rejected():
    with pytest.raises(ValueError):
        derive_stream(KEY, "K9")


def test_clone_forks_state():
    s = derive_stream(KEY, "K1")
    s.take_bytes(13)
    t = s.clone()
    assert s.take_bytes(100) == t.take_bytes(100)


def test_permutation_singleton():
    assert gen_permutation(derive_stream(KEY, "K1"), 1).tolist() == [0]


def test_permutation_empty_rejected():
    with pytest.raises(ValueError):
        gen_permutation(derive_stream(KEY, "K1"), 0)


def test_permutation_golden_value():
    # frozen once from the reference stream; guards cross-version drift
    got = gen_permutation(derive_stream(key_from_int(1), "K1"), 4).tolist()
    assert got == [1, 3, 2, 0]


def test_permutation_inverse_composes_to_identity():
    perm = gen_permutation(derive_stream(KEY, "K2"), 257)
    assert np.array_equal(perm[np.argsort(perm)], np.arange(257))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(min_value=1, max_value=600), seed=st.integers(0, 2**16))
def test_permutation_is_bijection(n, seed):
    perm = gen_permutation(derive_stream(key_from_int(seed), "K1"), n)
    assert np.array_equal(np.sort(perm), np.arange(n))


def test_bits_empty_and_determinism():
    assert gen_bits(derive_stream(KEY, "K3"), 0).size == 0
    a = gen_bits(derive_stream(KEY, "K3"), 999)
    b = gen_bits(derive_stream(KEY, "K3"), 999)
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0, 1}


def test_bits_are_fair():
    # 4 sigma band around 0.5 for 1e5 draws is ~0.0063; spec asks [0.49, 0.51]
    bits = gen_bits(derive_stream(KEY, "K3"), 100_000)
    assert 0.49 <= bits.mean() <= 0.51


def test_choice_k1_and_range():
    s = derive_stream(KEY, "K4")
    assert gen_choice(s, 1) == 0
    draws = gen_choices(derive_stream(KEY, "K4"), 8, 4000)
    assert draws.min() >= 0 and draws.max() < 8


def test_choice_frequencies_uniform():
    n = 60_000
    draws = gen_choices(derive_stream(KEY, "K4"), 6, n)
    counts = np.bincount(draws, minlength=6)
    p = 1 / 6
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_stream_independence_correlation():
    n = 100_000
    a = gen_bits(derive_stream(KEY, "K1"), n).astype(np.float64)
    b = gen_bits(derive_stream(KEY, "K2"), n).astype(np.float64)
    corr = np.corrcoef(a, b)[0, 1]
    assert abs(corr) < 0.02


def test_distinct_keys_give_distinct_epoch_keys():
    fps = {derive_epoch_key(KEY, e).fingerprint() for e in range(50)}
    assert len(fps) == 50
