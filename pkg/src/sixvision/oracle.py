"""Probing boundary: a deterministic synthetic IPv6 universe, a probe ledger,
alias detection, and an opt-in adapter for an external scanner binary."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import os
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .addr import Address, Prefix, PrefixTable, SeedSet, format_address, parse_address, parse_prefix

logger = logging.getLogger(__name__)

SCHEMES = ("counter-low64", "random-sparse", "word-pattern", "aliased")
SCANNER_ENV = "SIXVISION_SCANNER"
DEFAULT_RATE = "10M"
MAX_ENUMERABLE = 1 << 20


class InvalidSpec(ValueError):
    pass


class BudgetExhausted(RuntimeError):
    def __init__(self, verdicts: list["ProbeVerdict"], cap: int):
        self.verdicts = verdicts
        self.cap = cap
        super().__init__(f"probe budget of {cap} exhausted after {len(verdicts)} verdicts")


class ScannerUnavailable(RuntimeError):
    pass


class ScannerParseError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProbeVerdict:
    address: Address
    active: bool
    rtt_ticks: int = 0


def _unit_hash(value: int, key: bytes) -> float:
    digest = hashlib.blake2b(value.to_bytes(16, "big"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def parse_template(template: str) -> tuple[int, int, list[int]]:
    """Split a full-form template like ``2001:0db8:0000:00*0::...`` into
    (fixed value, fixed mask, free nybble indices). Every group must have
    four characters; ``*`` marks a free nybble."""
    groups = template.lower().split(":")
    if len(groups) != 8 or any(len(g) != 4 for g in groups):
        raise InvalidSpec(f"template {template!r} must be 8 groups of 4 characters")
    value = mask = 0
    free = []
    for i, ch in enumerate("".join(groups)):
        value <<= 4
        mask <<= 4
        if ch == "*":
            free.append(i)
        elif ch in "0123456789abcdef":
            value |= int(ch, 16)
            mask |= 0xF
        else:
            raise InvalidSpec(f"bad template character {ch!r}")
    return value, mask, free


@dataclass(frozen=True)
class PrefixScheme:
    prefix: Prefix
    scheme: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidSpec(f"unknown scheme {self.scheme!r}")
        p = self.params
        if self.scheme == "counter-low64":
            if self.prefix.length > 64:
                raise InvalidSpec("counter-low64 needs a prefix of length <= 64")
            if int(p.get("count", 0)) < 1:
                raise InvalidSpec("counter-low64 needs count >= 1")
        elif self.scheme == "random-sparse":
            span = int(p.get("span", 16))
            if not 0 < span <= 128 - self.prefix.length or span > 24:
                raise InvalidSpec("random-sparse span must fit under the prefix and be <= 24")
            if not 0 <= float(p.get("density", 0)) <= 1:
                raise InvalidSpec("density must lie in [0, 1]")
        elif self.scheme == "word-pattern":
            value, mask, free = parse_template(p.get("template", ""))
            inside = self.prefix.contains(Address(value)) and all(4 * f >= self.prefix.length for f in free)
            if not inside or 16 ** len(free) > MAX_ENUMERABLE:
                raise InvalidSpec("word-pattern template must lie under its prefix with <= 5 free nybbles")
            if not 0 <= float(p.get("density", 1.0)) <= 1:
                raise InvalidSpec("density must lie in [0, 1]")


class SyntheticUniverse:
    """Immutable map of prefixes to activity schemes.

    Non-aliased activity is a pure function of (address, universe seed);
    every address under an aliased prefix answers.
    """

    def __init__(self, prefixes: Sequence[PrefixScheme], universe_seed: int = 0):
        self.prefixes = tuple(prefixes)
        self.universe_seed = universe_seed
        self._key = universe_seed.to_bytes(8, "big", signed=False)
        self._table = PrefixTable(ps.prefix for ps in self.prefixes)
        self._by_prefix = {ps.prefix: ps for ps in self.prefixes}
        if len(self._by_prefix) != len(self.prefixes):
            raise InvalidSpec("duplicate prefix in universe")
        self._templates = {ps.prefix: parse_template(ps.params["template"])
                           for ps in self.prefixes if ps.scheme == "word-pattern"}

    @property
    def table(self) -> PrefixTable:
        return self._table

    def scheme_of(self, a: Address) -> PrefixScheme | None:
        p = self._table.lookup(a)
        return None if p is None else self._by_prefix[p]

    def is_aliased(self, a: Address) -> bool:
        ps = self.scheme_of(a)
        return ps is not None and ps.scheme == "aliased"

    def is_active(self, a: Address) -> bool:
        ps = self.scheme_of(a)
        if ps is None:
            return False
        host = a.value - ps.prefix.base.value
        if ps.scheme == "aliased":
            return True
        if ps.scheme == "counter-low64":
            low = host & ((1 << 64) - 1)
            subnet = host >> 64
            return subnet < int(ps.params.get("subnets", 1)) and low < int(ps.params["count"])
        if ps.scheme == "random-sparse":
            span = int(ps.params.get("span", 16))
            if host >> span:
                return False
            return _unit_hash(a.value, self._key) < float(ps.params["density"])
        value, mask, _ = self._templates[ps.prefix]
        if a.value & mask != value:
            return False
        density = float(ps.params.get("density", 1.0))
        return density >= 1.0 or _unit_hash(a.value, self._key) < density

    def rtt_ticks(self, a: Address) -> int:
        return 10 + int(_unit_hash(a.value ^ 0x5A5A, self._key) * 90)

    def verdict(self, a: Address) -> ProbeVerdict:
        active = self.is_active(a)
        return ProbeVerdict(a, active, self.rtt_ticks(a) if active else 0)

    def candidate_space(self, ps: PrefixScheme) -> Iterable[Address]:
        """Addresses that may be active under a non-aliased prefix, in order."""
        base = ps.prefix.base.value
        if ps.scheme == "counter-low64":
            count = int(ps.params["count"])
            for s in range(int(ps.params.get("subnets", 1))):
                for i in range(count):
                    yield Address(base + (s << 64) + i)
        elif ps.scheme == "random-sparse":
            for i in range(1 << int(ps.params.get("span", 16))):
                yield Address(base + i)
        elif ps.scheme == "word-pattern":
            value, _, free = self._templates[ps.prefix]
            for digits in itertools.product(range(16), repeat=len(free)):
                v = value
                for pos, d in zip(free, digits):
                    v |= d << (124 - 4 * pos)
                yield Address(v)
        else:
            raise ValueError("aliased prefixes are not enumerable")

    def ground_truth(self, prefix: Prefix) -> list[Address]:
        ps = self._by_prefix[prefix]
        return [a for a in self.candidate_space(ps) if self.is_active(a)]

    def active_count(self, prefix: Prefix) -> int:
        return len(self.ground_truth(prefix))

    def aliased_prefixes(self) -> list[Prefix]:
        return [ps.prefix for ps in self.prefixes if ps.scheme == "aliased"]


class ProbeLedger:
    """Unique-address probe record; the only mutable probing state."""

    def __init__(self, cap: int | None = None):
        self.cap = cap
        self.probed: dict[Address, ProbeVerdict] = {}
        self.budget_spent = 0
        self.aliased_prefixes: set[Prefix] = set()
        self.alias_checked: dict[Prefix, bool] = {}
        # responsive probe addresses behind each positive alias check
        self.alias_evidence: dict[Prefix, list[Address]] = {}
        self.alias_probes = 0
        self._lock = threading.Lock()

    def record(self, verdict: ProbeVerdict) -> bool:
        with self._lock:
            if verdict.address in self.probed:
                return False
            if self.cap is not None and self.budget_spent >= self.cap:
                raise BudgetExhausted([], self.cap)
            self.probed[verdict.address] = verdict
            self.budget_spent += 1
            return True

    def actives(self) -> list[Address]:
        return [a for a, v in self.probed.items() if v.active]

    def under_known_alias(self, a: Address) -> bool:
        return any(p.contains(a) for p in self.aliased_prefixes)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["address", "active"])
            for a, v in self.probed.items():
                w.writerow([format_address(a), int(v.active)])


def probe(u: SyntheticUniverse, batch: Iterable[Address], ledger: ProbeLedger) -> list[ProbeVerdict]:
    """One packet per new address; re-probes are answered from the ledger free."""
    out = []
    for a in batch:
        known = ledger.probed.get(a)
        if known is not None:
            out.append(known)
            continue
        v = u.verdict(a)
        try:
            ledger.record(v)
        except BudgetExhausted as exc:
            raise BudgetExhausted(out, exc.cap) from None
        out.append(v)
    return out


Responder = Callable[[Sequence[Address]], set]


def _responder(target) -> Responder:
    if isinstance(target, SyntheticUniverse):
        return lambda addrs: {a for a in addrs if target.is_active(a)}
    if hasattr(target, "responding"):
        return target.responding
    if callable(target):
        return target
    raise TypeError(f"cannot probe with {type(target).__name__}")


def alias_probe_addresses(prefix: Prefix, probes: int = 16, check_len: int | None = None,
                          seed: int = 0) -> list[Address]:
    """Pseudorandom addresses under ``prefix``, spread round-robin over its
    ``2**(check_len - length)`` branches."""
    check_len = prefix.length + 4 if check_len is None else check_len
    if not prefix.length < check_len <= 128:
        raise ValueError("check_len must exceed the prefix length")
    branch_bits = check_len - prefix.length
    tail_bits = 128 - check_len
    rng = np.random.default_rng([seed, prefix.base.value & 0xFFFFFFFF, prefix.length])
    out = []
    for i in range(probes):
        branch = i % (1 << branch_bits)
        tail = int.from_bytes(rng.bytes(16), "big") & ((1 << tail_bits) - 1) if tail_bits else 0
        out.append(Address(prefix.base.value | (branch << tail_bits) | tail))
    return out


def detect_alias(u, prefix: Prefix, probes: int = 16, check_len: int | None = None,
                 seed: int = 0, ledger: ProbeLedger | None = None) -> bool:
    """True iff every pseudorandom probe under ``prefix`` responds."""
    addrs = alias_probe_addresses(prefix, probes, check_len, seed)
    alive = _responder(u)(addrs)
    aliased = all(a in alive for a in addrs)
    if ledger is not None:
        with ledger._lock:
            ledger.alias_probes += len(addrs)
            if aliased:
                ledger.alias_evidence[prefix] = addrs
    return aliased


class Prober(Protocol):
    def probe(self, addresses: Sequence[Address]) -> list[ProbeVerdict]: ...
    def is_aliased(self, prefix: Prefix) -> bool: ...


class SyntheticProber:
    """Prober backed by a SyntheticUniverse and a ProbeLedger."""

    def __init__(self, universe: SyntheticUniverse, ledger: ProbeLedger | None = None,
                 alias_probes: int = 16, alias_check_len_extra: int = 4, seed: int = 0):
        self.universe = universe
        self.ledger = ledger or ProbeLedger()
        self.alias_probes = alias_probes
        self.alias_check_len_extra = alias_check_len_extra
        self.seed = seed

    def probe(self, addresses: Sequence[Address]) -> list[ProbeVerdict]:
        return probe(self.universe, addresses, self.ledger)

    def is_aliased(self, prefix: Prefix) -> bool:
        known = self.ledger.alias_checked.get(prefix)
        if known is None:
            known = detect_alias(self.universe, prefix, self.alias_probes,
                                 prefix.length + self.alias_check_len_extra, self.seed, self.ledger)
            self.ledger.alias_checked[prefix] = known
            if known:
                self.ledger.aliased_prefixes.add(prefix)
        return known

    def fresh(self) -> "SyntheticProber":
        return SyntheticProber(self.universe, ProbeLedger(self.ledger.cap), self.alias_probes,
                               self.alias_check_len_extra, self.seed)


# -- external scanner -------------------------------------------------------

@dataclass
class ScannerConfig:
    """Opt-in settings for handing candidates to an operator-supplied scanner.

    The binary reads newline-separated addresses on stdin and prints the
    responding ones on stdout. ``rate`` is always passed as ``--bandwidth``.
    """

    enabled: bool = False
    acknowledge_live_scanning: bool = False
    binary: str | None = None
    rate: str = DEFAULT_RATE
    extra_args: tuple[str, ...] = ()
    timeout: float | None = 3600.0

    def command(self) -> list[str]:
        binary = self.binary or os.environ.get(SCANNER_ENV)
        if not binary:
            raise ScannerUnavailable(f"no scanner binary configured; set {SCANNER_ENV} or ScannerConfig.binary")
        return [binary, f"--bandwidth={self.rate}", "--probe-module=icmp6_echoscan", *self.extra_args]


def external_scan(batch: Iterable[Address], config: ScannerConfig | None = None) -> list[ProbeVerdict]:
    config = config or ScannerConfig()
    if not (config.enabled and config.acknowledge_live_scanning):
        raise ScannerUnavailable(
            "external scanning is disabled; it sends real packets to real networks. "
            "Enable it with ScannerConfig(enabled=True, acknowledge_live_scanning=True) "
            f"and point {SCANNER_ENV} at a scanner that reads addresses on stdin.")
    addrs = list(batch)
    cmd = config.command()
    try:
        proc = subprocess.run(cmd, input="\n".join(format_address(a) for a in addrs) + "\n",
                              capture_output=True, text=True, timeout=config.timeout, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise ScannerUnavailable(f"scanner failed to run: {exc}") from exc
    if proc.returncode != 0:
        raise ScannerUnavailable(f"scanner exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
    alive = set()
    for lineno, line in enumerate(proc.stdout.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            alive.add(parse_address(line))
        except ValueError as exc:
            raise ScannerParseError(f"scanner output line {lineno}: {exc}") from exc
    return [ProbeVerdict(a, a in alive) for a in addrs]


class ScannerProber:
    """Prober that forwards to :func:`external_scan`."""

    def __init__(self, config: ScannerConfig, ledger: ProbeLedger | None = None, seed: int = 0):
        self.config = config
        self.ledger = ledger or ProbeLedger()
        self.seed = seed

    def responding(self, addresses: Sequence[Address]) -> set:
        return {v.address for v in external_scan(addresses, self.config) if v.active}

    def probe(self, addresses: Sequence[Address]) -> list[ProbeVerdict]:
        new = [a for a in dict.fromkeys(addresses) if a not in self.ledger.probed]
        for v in external_scan(new, self.config) if new else []:
            self.ledger.record(v)
        return [self.ledger.probed[a] for a in addresses]

    def is_aliased(self, prefix: Prefix) -> bool:
        known = self.ledger.alias_checked.get(prefix)
        if known is None:
            known = detect_alias(self, prefix, 16, prefix.length + 4, self.seed, self.ledger)
            self.ledger.alias_checked[prefix] = known
            if known:
                self.ledger.aliased_prefixes.add(prefix)
        return known


# -- universe construction ----------------------------------------------------

def _seed_for(ps: PrefixScheme, u: SyntheticUniverse, m: int, bias, rng: np.random.Generator) -> list[Address]:
    if ps.scheme == "aliased":
        host_bits = min(64, 128 - ps.prefix.length)
        return [Address(ps.prefix.base.value | int.from_bytes(rng.bytes(8), "big") & ((1 << host_bits) - 1))
                for _ in range(m)]
    actives = u.ground_truth(ps.prefix)
    kind = bias if isinstance(bias, str) else bias.get("kind", "random")
    if kind == "restrict":
        pos, allowed = int(bias["nybble"]), set(bias["values"])
        actives = [a for a in actives if a.nybbles[pos] in allowed]
        kind = bias.get("then", "random")
    if len(actives) < m:
        raise InvalidSpec(f"{ps.prefix} has only {len(actives)} eligible actives for {m} seeds")
    if kind == "first":
        return actives[:m]
    if kind == "random":
        idx = rng.choice(len(actives), size=m, replace=False)
        return [actives[i] for i in sorted(idx)]
    raise InvalidSpec(f"unknown bias rule {bias!r}")


def build_universe(spec: dict, universe_seed: int | None = None) -> tuple[SyntheticUniverse, SeedSet]:
    """Build a universe and its biased seed sample from a JSON-style spec.

    Spec layout::

        {"universe_seed": 1,
         "prefixes": [{"prefix": "2001:db8:1::/48", "scheme": "counter-low64",
                       "params": {"count": 200}, "seeds": 5, "bias": "first"}, ...]}

    ``bias`` is ``"first"``, ``"random"``, or
    ``{"kind": "restrict", "nybble": i, "values": [...], "then": "random"}``.
    """
    if not isinstance(spec, dict) or not isinstance(spec.get("prefixes"), list):
        raise InvalidSpec("universe spec needs a 'prefixes' list")
    seed = int(spec.get("universe_seed", 0) if universe_seed is None else universe_seed)
    entries = []
    try:
        for item in spec["prefixes"]:
            entries.append(PrefixScheme(parse_prefix(item["prefix"]), item["scheme"], dict(item.get("params", {}))))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidSpec(f"bad prefix entry: {exc}") from exc
    u = SyntheticUniverse(entries, seed)
    rng = np.random.default_rng(seed)
    seeds: list[Address] = []
    for ps, item in zip(entries, spec["prefixes"]):
        m = int(item.get("seeds", 0))
        if m:
            seeds += _seed_for(ps, u, m, item.get("bias", "random"), rng)
    return u, SeedSet.from_addresses(seeds, u.table)


def load_universe(path: str | Path, universe_seed: int | None = None) -> tuple[SyntheticUniverse, SeedSet]:
    return build_universe(json.loads(Path(path).read_text()), universe_seed)
