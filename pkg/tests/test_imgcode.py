import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sixvision import imgcode
from sixvision.addr import Address, parse_address
from sixvision.imgcode import (AddressImageEncoder, EmptySet, EmptySubclass, decode, encode, pair_indices,
                               set_entropy, stitch_addresses, stitch_pairs)

addresses = st.integers(0, 2**128 - 1).map(Address)


def test_worked_example_rows():
    img = encode(parse_address("2804:30d0:200:200:100:116:0:b"))
    assert img.shape == (8, 16)
    assert "".join(map(str, img[0])) == "0010100000000100"
    assert "".join(map(str, img[1])) == format(0x30D0, "016b")


def test_extremes():
    assert not encode(Address(0)).any()
    assert encode(parse_address("ffff:ffff:ffff:ffff:ffff:ffff:ffff:ffff")).all()
    img = np.zeros((8, 16), dtype=np.uint8)
    assert decode(img) == Address(0)
    img[7, 15] = 1
    assert decode(img) == Address(1)


@given(st.lists(addresses, min_size=1, max_size=50))
def test_bijection(addrs):
    assert imgcode.decode_many(imgcode.encode_many(addrs)) == addrs


@given(addresses)
def test_row_g_is_group_g(a):
    img = encode(a)
    for g in range(8):
        assert int("".join(map(str, img[g])), 2) == a.groups[g]


def _entropy_oracle(addrs, mode):
    # plain-Python reference: per-bit frequency over the distinct set
    uniq = sorted(set(addrs))
    out = []
    for i in range(128):
        p = sum((a.value >> (127 - i)) & 1 for a in uniq) / len(uniq)
        h = 0.0 if p in (0.0, 1.0) else -(p * math.log2(p) + (1 - p) * math.log2(1 - p))
        out.append(h / 4 if mode == "paper-literal" else h)
    return out


@pytest.mark.parametrize("mode", ["standard", "paper-literal"])
@given(st.lists(addresses, min_size=1, max_size=30))
def test_entropy_matches_oracle(mode, addrs):
    e = set_entropy(addrs, mode)
    ref = _entropy_oracle(addrs, mode)
    assert np.allclose(e.values.ravel(), ref, atol=1e-12)
    assert e.ce == pytest.approx(sum(ref) / 128, abs=1e-12)


def test_entropy_pair():
    e = set_entropy([Address(0), Address(1)])
    assert e.values[7, 15] == 1.0
    assert e.values.sum() == 1.0
    assert abs(e.ce - 1 / 128) < 1e-12
    lit = set_entropy([Address(0), Address(1)], "paper-literal")
    assert abs(lit.values[7, 15] - 0.25) < 1e-12


def test_entropy_singleton_and_duplicates():
    assert set_entropy([Address(5)]).ce == 0
    assert set_entropy([Address(0), Address(1), Address(1)]).ce == set_entropy([Address(0), Address(1)]).ce
    with pytest.raises(EmptySet):
        set_entropy([])


@given(st.lists(addresses, min_size=1, max_size=30))
def test_entropy_bounds(addrs):
    e = set_entropy(addrs)
    assert (e.values >= 0).all() and (e.values <= 1).all()


def test_stitch_three():
    pairs = pair_indices(3, 5)
    assert len(pairs) == 6
    assert len(set(pairs)) == 6
    assert all(t != b for t, b in pairs)


def test_stitch_singleton():
    out = stitch_addresses([Address(9)])
    assert out.shape == (1, 16, 16)
    assert (out[0, :8] == out[0, 8:]).all()


def test_stitch_empty():
    with pytest.raises(EmptySubclass):
        pair_indices(0)


@given(st.integers(1, 40), st.integers(1, 8))
def test_stitch_count(n, fanout):
    pairs = pair_indices(n, fanout)
    assert len(pairs) == (1 if n == 1 else n * min(fanout, n - 1))
    assert len(set(pairs)) == len(pairs)


def test_stitch_halves_are_members():
    addrs = [parse_address(f"2001:db8::{i:x}") for i in range(7)]
    out = stitch_addresses(addrs)
    members = {a for a in addrs}
    for img in out:
        assert decode(img[:8]) in members and decode(img[8:]) in members


def test_stitch_sequential_neighbours():
    imgs = imgcode.encode_many([Address(i) for i in range(4)])
    out = stitch_pairs(imgs, fanout=1)
    assert [decode(x[8:]).value for x in out] == [1, 2, 3, 0]


def test_pgm_roundtrip(tmp_path):
    e = set_entropy([Address(0), Address(1), Address(3)])
    e.to_pgm(tmp_path / "e.pgm")
    back = imgcode.read_pgm(tmp_path / "e.pgm")
    assert back.shape == (8, 16)
    assert np.allclose(back, np.rint(e.values * 255) / 255)


def test_estimator_api():
    addrs = [Address(i) for i in range(5)]
    enc = AddressImageEncoder(flatten=True)
    X = enc.fit_transform(addrs)
    assert X.shape == (5, 128)
    assert list(enc.inverse_transform(X)) == addrs
    assert enc.get_params() == {"flatten": True}
