import os
import stat
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sixvision.addr import Address, Prefix, parse_address, parse_prefix
from sixvision.oracle import (BudgetExhausted, InvalidSpec, PrefixScheme, ProbeLedger, ScannerConfig,
                              ScannerParseError, ScannerUnavailable, SyntheticProber, SyntheticUniverse,
                              alias_probe_addresses, build_universe, detect_alias, external_scan, probe)


def universe(*schemes, seed=1):
    return SyntheticUniverse([PrefixScheme(parse_prefix(p), s, params) for p, s, params in schemes], seed)


U = universe(("2001:db8:1::/48", "counter-low64", {"count": 10}),
             ("2001:db8:2::/48", "aliased", {}),
             ("2001:db8:3::/48", "random-sparse", {"density": 0.01, "span": 16}),
             ("2001:db8:4::/48", "word-pattern", {"template": "2001:0db8:0004:0000:0000:0000:0000:*0*1",
                                                  "density": 1.0}))


def test_counter_rule():
    assert U.is_active(parse_address("2001:db8:1::5"))
    assert not U.is_active(parse_address("2001:db8:1::a"))
    assert not U.is_active(parse_address("2001:db8:1:1::5"))


def test_alias_and_unconfigured():
    assert U.is_active(parse_address("2001:db8:2:dead::beef"))
    assert not U.is_active(parse_address("2001:db9::1"))


def test_word_pattern():
    assert U.is_active(parse_address("2001:db8:4::a0b1"))
    assert not U.is_active(parse_address("2001:db8:4::a0b2"))
    assert len(U.ground_truth(parse_prefix("2001:db8:4::/48"))) == 256


def test_sparse_density_close():
    truth = U.ground_truth(parse_prefix("2001:db8:3::/48"))
    assert 0.005 < len(truth) / 2**16 < 0.015


def test_verdicts_are_pure():
    again = universe(*[(str(ps.prefix), ps.scheme, ps.params) for ps in U.prefixes])
    for i in range(200):
        a = Address(parse_prefix("2001:db8:3::/48").base.value + i)
        assert again.is_active(a) == U.is_active(a)


def test_invalid_specs():
    with pytest.raises(InvalidSpec):
        PrefixScheme(parse_prefix("2001:db8::/96"), "counter-low64", {"count": 3})
    with pytest.raises(InvalidSpec):
        PrefixScheme(parse_prefix("2001:db8::/48"), "random-sparse", {"density": 2})
    with pytest.raises(InvalidSpec):
        PrefixScheme(parse_prefix("2001:db8::/48"), "word-pattern", {"template": "2001:0db9::*"})
    with pytest.raises(InvalidSpec):
        PrefixScheme(parse_prefix("2001:db8::/48"), "mystery", {})


def test_ledger_dedupes_and_caps():
    led = ProbeLedger(cap=3)
    addrs = [parse_address(f"2001:db8:1::{i}") for i in range(5)]
    probe(U, addrs[:2] + addrs[:2], led)
    assert led.budget_spent == 2
    with pytest.raises(BudgetExhausted) as exc:
        probe(U, addrs, led)
    assert len(exc.value.verdicts) == 3
    assert led.budget_spent == 3


def test_detect_alias():
    assert detect_alias(U, parse_prefix("2001:db8:2::/48"))
    assert not detect_alias(U, parse_prefix("2001:db8:1::/48"))
    assert not detect_alias(U, parse_prefix("2001:db8:3::/48"))


@settings(max_examples=100)
@given(st.integers(0, 2**32))
def test_detect_alias_any_seed(seed):
    assert detect_alias(U, parse_prefix("2001:db8:2::/48"), 16, seed=seed)
    assert not detect_alias(U, parse_prefix("2001:db8:3::/48"), 16, seed=seed)


def test_alias_probes_cover_branches():
    p = parse_prefix("2001:db8::/48")
    addrs = alias_probe_addresses(p, 16)
    assert len({a.nybbles[12] for a in addrs}) == 16
    assert all(p.contains(a) for a in addrs)


def test_prober_caches_alias_checks():
    pr = SyntheticProber(U)
    p = parse_prefix("2001:db8:2::/96")
    assert pr.is_aliased(p) and pr.is_aliased(p)
    assert pr.ledger.alias_probes == 16
    assert pr.fresh().ledger.budget_spent == 0


def test_build_universe_first_bias_and_determinism():
    spec = {"universe_seed": 4, "prefixes": [
        {"prefix": f"2001:db8:{i}::/48", "scheme": "counter-low64", "params": {"count": 50},
         "seeds": 5, "bias": "first"} for i in range(20)]}
    u, seeds = build_universe(spec)
    assert len(seeds) == 100
    assert all(c == 5 for c in seeds.prefix_counts().values())
    first = sorted(a for a in seeds if seeds.prefix_index[a] == parse_prefix("2001:db8:0::/48"))
    assert [a.value & 0xFFFF for a in first] == [0, 1, 2, 3, 4]
    u2, seeds2 = build_universe(spec)
    assert seeds2.addresses == seeds.addresses
    assert all(u.is_active(a) for a in seeds)


def test_build_universe_restrict_bias():
    spec = {"prefixes": [{"prefix": "2001:db8::/48", "scheme": "word-pattern",
                          "params": {"template": "2001:0db8:0000:000*:0000:0000:0000:00**"},
                          "seeds": 8, "bias": {"kind": "restrict", "nybble": 15, "values": [0]}}]}
    _, seeds = build_universe(spec)
    assert all(a.nybbles[15] == 0 for a in seeds)


def test_build_universe_rejects_garbage():
    with pytest.raises(InvalidSpec):
        build_universe({"prefixes": [{"scheme": "aliased"}]})
    with pytest.raises(InvalidSpec):
        build_universe({"nothing": 1})


def test_scanner_disabled_by_default():
    with pytest.raises(ScannerUnavailable, match="disabled"):
        external_scan([Address(1)])


def _mock_scanner(tmp_path, body):
    path = tmp_path / "scanner.py"
    path.write_text(f"#!{sys.executable}\nimport sys\n{body}\n")
    path.chmod(path.stat().st_mode | stat.S_IXUSR)
    return str(path)


def test_mock_scanner_echo(tmp_path):
    live = ["2001:db8::1", "2001:db8::3"]
    binary = _mock_scanner(tmp_path, f"sys.stdin.read()\nprint('\\n'.join({live!r}))")
    cfg = ScannerConfig(enabled=True, acknowledge_live_scanning=True, binary=binary)
    batch = [parse_address(f"2001:db8::{i}") for i in range(5)]
    verdicts = external_scan(batch, cfg)
    assert [str(v.address) for v in verdicts if v.active] == live


def test_mock_scanner_env_and_rate(tmp_path, monkeypatch):
    binary = _mock_scanner(tmp_path, "sys.stdin.read()\nprint(sys.argv[1])")
    monkeypatch.setenv("SIXVISION_SCANNER", binary)
    cfg = ScannerConfig(enabled=True, acknowledge_live_scanning=True)
    with pytest.raises(ScannerParseError):
        external_scan([Address(1)], cfg)
    assert cfg.command()[1] == "--bandwidth=10M"


def test_scanner_failure(tmp_path):
    binary = _mock_scanner(tmp_path, "sys.exit(3)")
    cfg = ScannerConfig(enabled=True, acknowledge_live_scanning=True, binary=binary)
    with pytest.raises(ScannerUnavailable):
        external_scan([Address(1)], cfg)
