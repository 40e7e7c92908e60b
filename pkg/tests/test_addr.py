import ipaddress

import pytest
from hypothesis import given, strategies as st

from sixvision.addr import (CATCH_ALL, Address, EmptySeedSet, MalformedAddress, Prefix, PrefixTable,
                            SeedSet, few_seed_census, format_address, load_hitlist, parse_address,
                            parse_prefix, write_hitlist)

addresses = st.integers(0, 2**128 - 1).map(Address)


def test_worked_example_first_group():
    a = parse_address("2804:30d0:200:200:100:116:0:b")
    assert "".join(map(str, a.bits[:16])) == "0010100000000100"


def test_zero_and_one():
    assert parse_address("::").bits == (0,) * 128
    assert format_address(Address(0)) == "::"
    assert format_address(Address(1)) == "::1"


def test_case_and_padding_invariance():
    a = parse_address("2804:30d0:200:200:100:116:0:b")
    b = parse_address("2804:30D0:0200:0200:0100:0116:0000:000B")
    assert a == b
    assert format_address(a) == "2804:30d0:200:200:100:116:0:b"


def test_embedded_ipv4():
    assert parse_address("::ffff:1.2.3.4").value == 0xFFFF01020304


@pytest.mark.parametrize("text, pos", [("2001:db8::g", 10), ("1::2::3", 4), ("12345::", 0), ("", 0)])
def test_malformed_reports_position(text, pos):
    with pytest.raises(MalformedAddress) as exc:
        parse_address(text)
    assert exc.value.position == pos


def test_too_many_groups():
    with pytest.raises(MalformedAddress):
        parse_address("1:2:3:4:5:6:7:8:9")


@given(addresses)
def test_format_parse_roundtrip(a):
    assert parse_address(format_address(a)) == a


@given(addresses)
def test_format_matches_stdlib(a):
    # independent oracle: the stdlib renderer
    assert format_address(a) == str(ipaddress.IPv6Address(a.value))


@given(addresses)
def test_bits_nybbles_groups_agree(a):
    assert Address.from_bits(a.bits) == a
    assert Address.from_nybbles(a.nybbles) == a
    assert sum(g << (112 - 16 * i) for i, g in enumerate(a.groups)) == a.value


@given(addresses, st.integers(0, 128))
def test_prefix_of_contains(a, length):
    p = Prefix.of(a, length)
    assert p.contains(a)
    assert p.size == 2 ** (128 - length)


def test_longest_match():
    table = PrefixTable([parse_prefix("2001:db8::/32"), parse_prefix("2001:db8:1::/48")])
    assert table.lookup(parse_address("2001:db8:1::5")) == parse_prefix("2001:db8:1::/48")
    assert table.lookup(parse_address("2001:db8:2::5")) == parse_prefix("2001:db8::/32")
    assert table.lookup(parse_address("2001:db9::1")) is None
    assert table.assign(parse_address("2001:db9::1")) == CATCH_ALL


def test_load_dedupes(tmp_hitlist):
    p = tmp_hitlist(["2001:db8::1", "2001:db8::2", "2001:db8::1", "2001:db8::3", "2001:db8::2"])
    s = load_hitlist(p)
    assert len(s) == 3
    assert s.report.duplicates == 2


def test_load_longest_match_and_catch_all(tmp_hitlist, tmp_path):
    hl = tmp_hitlist(["2001:db8::1", "2001:db9::1"])
    table = tmp_path / "prefixes.txt"
    table.write_text("2001:db8::/32\n")
    s = load_hitlist(hl, table)
    idx = {str(a): str(p) for a, p in s.prefix_index.items()}
    assert idx == {"2001:db8::1": "2001:db8::/32", "2001:db9::1": "::/0"}


def test_load_empty(tmp_hitlist):
    with pytest.raises(EmptySeedSet):
        load_hitlist(tmp_hitlist(["# nothing here"]))


def test_load_collects_bad_lines(tmp_hitlist):
    s = load_hitlist(tmp_hitlist(["2001:db8::1", "not-an-address", "2001:db8::2"]))
    assert len(s) == 2
    assert [ln for ln, _ in s.report.errors] == [2]


def test_census_counts():
    counts = {parse_prefix(f"2001:db8:{i}::/48"): c for i, c in enumerate([3, 12, 9, 40])}
    rep = few_seed_census(counts, 10)
    assert rep.few_seed == 2
    assert rep.ratio == 0.5
    assert few_seed_census({k: 10 + v for k, v in counts.items()}).ratio == 0


def test_census_csv(tmp_path):
    s = SeedSet.from_addresses([parse_address("2001:db8::1"), parse_address("2001:db8::2")],
                               [parse_prefix("2001:db8::/32")])
    few_seed_census(s).write_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == ["prefix,count", "2001:db8::/32,2"]


@given(st.lists(addresses, max_size=20))
def test_hitlist_roundtrip(tmp_path_factory, addrs):
    path = tmp_path_factory.mktemp("hl") / "h.txt"
    write_hitlist(addrs, path)
    if addrs:
        assert set(load_hitlist(path).addresses) == set(addrs)
