"""IPv6 address values, prefixes, and hitlist ingestion."""

from __future__ import annotations

import csv
import ipaddress
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

logger = logging.getLogger(__name__)

ADDRESS_BITS = 128
_ALL_ONES = (1 << ADDRESS_BITS) - 1
_HEX = set("0123456789abcdefABCDEF")


class AddressError(ValueError):
    """Base class for address-layer failures."""


class MalformedAddress(AddressError):
    def __init__(self, text: str, position: int, reason: str):
        self.text = text
        self.position = position
        self.reason = reason
        super().__init__(f"malformed IPv6 literal {text!r} at position {position}: {reason}")


class EmptySeedSet(AddressError):
    pass


@dataclass(frozen=True, order=True, slots=True)
class Address:
    """A 128-bit IPv6 address stored as an integer, most-significant bit first."""

    value: int

    def __post_init__(self):
        if not 0 <= self.value <= _ALL_ONES:
            raise AddressError(f"address value out of range: {self.value}")

    @property
    def bits(self) -> tuple[int, ...]:
        v = self.value
        return tuple((v >> (127 - i)) & 1 for i in range(ADDRESS_BITS))

    @property
    def groups(self) -> tuple[int, ...]:
        v = self.value
        return tuple((v >> (112 - 16 * g)) & 0xFFFF for g in range(8))

    @property
    def nybbles(self) -> tuple[int, ...]:
        v = self.value
        return tuple((v >> (124 - 4 * n)) & 0xF for n in range(32))

    @classmethod
    def from_bits(cls, bits: Iterable[int]) -> "Address":
        bits = list(bits)
        if len(bits) != ADDRESS_BITS:
            raise AddressError(f"expected 128 bits, got {len(bits)}")
        v = 0
        for b in bits:
            v = (v << 1) | (1 if b else 0)
        return cls(v)

    @classmethod
    def from_nybbles(cls, nybbles: Iterable[int]) -> "Address":
        v = 0
        count = 0
        for n in nybbles:
            v = (v << 4) | (n & 0xF)
            count += 1
        if count != 32:
            raise AddressError(f"expected 32 nybbles, got {count}")
        return cls(v)

    def __str__(self) -> str:
        return format_address(self)

    def __repr__(self) -> str:
        return f"Address('{format_address(self)}')"


def _diagnose(text: str) -> MalformedAddress:
    """Locate the first offending character of a literal ipaddress rejected."""
    if not text:
        return MalformedAddress(text, 0, "empty string")
    first = text.find("::")
    if first != -1 and text.find("::", first + 1) != -1:
        return MalformedAddress(text, text.find("::", first + 1), "'::' appears more than once")
    tail_v4 = "." in text
    for i, ch in enumerate(text):
        if ch == ":" or ch in _HEX or (tail_v4 and ch == "."):
            continue
        return MalformedAddress(text, i, f"unexpected character {ch!r}")
    pos = 0
    for part in text.split(":"):
        if len(part) > 4 and "." not in part:
            return MalformedAddress(text, pos, f"group {part!r} longer than four hex digits")
        pos += len(part) + 1
    ngroups = len([p for p in text.split(":") if p])
    return MalformedAddress(text, len(text), f"wrong group count ({ngroups})")


def parse_address(text: str) -> Address:
    """Parse a full, compressed, or embedded-IPv4 IPv6 literal in any letter case."""
    stripped = text.strip()
    try:
        ip = ipaddress.IPv6Address(stripped)
    except ipaddress.AddressValueError:
        raise _diagnose(stripped) from None
    if ip.scope_id is not None:
        raise MalformedAddress(stripped, stripped.index("%"), "zone identifiers are not supported")
    return Address(int(ip))


def format_address(a: Address) -> str:
    return ipaddress.IPv6Address(a.value).compressed


def _mask(length: int) -> int:
    return (_ALL_ONES << (ADDRESS_BITS - length)) & _ALL_ONES if length else 0


@dataclass(frozen=True, order=True, slots=True)
class Prefix:
    base: Address
    length: int

    def __post_init__(self):
        if not 0 <= self.length <= ADDRESS_BITS:
            raise AddressError(f"prefix length out of range: {self.length}")
        if self.base.value & ~_mask(self.length) & _ALL_ONES:
            raise AddressError(f"host bits set in prefix {self.base}/{self.length}")

    @classmethod
    def of(cls, a: Address, length: int) -> "Prefix":
        """The prefix of the given length that contains ``a``."""
        return cls(Address(a.value & _mask(length)), length)

    @property
    def size(self) -> int:
        return 1 << (ADDRESS_BITS - self.length)

    def contains(self, a: Address) -> bool:
        return (a.value & _mask(self.length)) == self.base.value

    def __str__(self) -> str:
        return f"{format_address(self.base)}/{self.length}"


CATCH_ALL = Prefix(Address(0), 0)


def parse_prefix(text: str) -> Prefix:
    text = text.strip()
    if "/" not in text:
        raise MalformedAddress(text, len(text), "missing '/length'")
    addr_text, _, len_text = text.partition("/")
    try:
        length = int(len_text)
    except ValueError:
        raise MalformedAddress(text, len(addr_text) + 1, "prefix length is not an integer") from None
    return Prefix(parse_address(addr_text), length)


class PrefixTable:
    """Longest-prefix-match lookup over a fixed set of prefixes."""

    def __init__(self, prefixes: Iterable[Prefix] = ()):
        self._by_len: dict[int, dict[int, Prefix]] = {}
        for p in prefixes:
            self._by_len.setdefault(p.length, {})[p.base.value] = p
        self._lengths = sorted(self._by_len, reverse=True)

    def __len__(self) -> int:
        return sum(len(d) for d in self._by_len.values())

    def __iter__(self):
        for length in sorted(self._by_len):
            yield from sorted(self._by_len[length].values())

    def lookup(self, a: Address) -> Prefix | None:
        for length in self._lengths:
            hit = self._by_len[length].get(a.value & _mask(length))
            if hit is not None:
                return hit
        return None

    def assign(self, a: Address) -> Prefix:
        return self.lookup(a) or CATCH_ALL


@dataclass
class LoadReport:
    lines: int = 0
    parsed: int = 0
    duplicates: int = 0
    unmatched: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)


@dataclass(frozen=True)
class SeedSet:
    """Deduplicated seeds, each mapped to its longest-matching table prefix."""

    addresses: tuple[Address, ...]
    prefix_index: Mapping[Address, Prefix]
    report: LoadReport = field(default_factory=LoadReport, compare=False)

    @classmethod
    def from_addresses(cls, addresses: Iterable[Address], table: PrefixTable | Iterable[Prefix]) -> "SeedSet":
        if not isinstance(table, PrefixTable):
            table = PrefixTable(table)
        uniq = sorted(set(addresses))
        index = {a: table.assign(a) for a in uniq}
        report = LoadReport(lines=len(uniq), parsed=len(uniq),
                            unmatched=sum(1 for p in index.values() if p is CATCH_ALL))
        return cls(tuple(uniq), index, report)

    def __len__(self) -> int:
        return len(self.addresses)

    def __iter__(self):
        return iter(self.addresses)

    def __contains__(self, a) -> bool:
        return a in self.prefix_index

    def prefix_counts(self) -> dict[Prefix, int]:
        return dict(Counter(self.prefix_index.values()))


def _content_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def load_prefix_table(path: str | Path) -> PrefixTable:
    prefixes = []
    for lineno, line in _content_lines(Path(path)):
        try:
            prefixes.append(parse_prefix(line))
        except AddressError as exc:
            logger.warning("prefix table line %d skipped: %s", lineno, exc)
    return PrefixTable(prefixes)


def load_hitlist(path: str | Path, prefix_table: str | Path | PrefixTable | None = None) -> SeedSet:
    """Read a hitlist, deduplicate it, and assign every address a prefix.

    Unparseable lines are collected in the report. Addresses outside every
    table prefix go to ``::/0`` so coverage counts never shrink silently.
    """
    if prefix_table is None:
        table = PrefixTable()
    elif isinstance(prefix_table, PrefixTable):
        table = prefix_table
    else:
        table = load_prefix_table(prefix_table)

    report = LoadReport()
    seen: set[Address] = set()
    for lineno, line in _content_lines(Path(path)):
        report.lines += 1
        try:
            a = parse_address(line)
        except AddressError as exc:
            report.errors.append((lineno, str(exc)))
            continue
        report.parsed += 1
        if a in seen:
            report.duplicates += 1
        seen.add(a)
    if not seen:
        raise EmptySeedSet(f"no valid addresses in {path}")

    uniq = sorted(seen)
    index = {a: table.assign(a) for a in uniq}
    report.unmatched = sum(1 for p in index.values() if p is CATCH_ALL)
    if report.errors:
        logger.warning("%d hitlist lines failed to parse", len(report.errors))
    return SeedSet(tuple(uniq), index, report)


@dataclass(frozen=True)
class CensusReport:
    counts: dict[Prefix, int]
    threshold: int
    prefixes: int
    few_seed: int
    ratio: float

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["prefix", "count"])
            for p, c in sorted(self.counts.items()):
                w.writerow([str(p), c])


def few_seed_census(seeds: SeedSet | Mapping[Prefix, int], threshold: int = 10) -> CensusReport:
    """Count seeds per prefix and the share of prefixes below ``threshold``."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    counts = dict(seeds.prefix_counts() if isinstance(seeds, SeedSet) else seeds)
    few = sum(1 for c in counts.values() if c < threshold)
    ratio = few / len(counts) if counts else 0.0
    return CensusReport(counts, threshold, len(counts), few, ratio)


def write_hitlist(addresses: Iterable[Address], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in addresses:
            fh.write(format_address(a) + "\n")
