"""HitRate, CoverNum, conversion gain and conversion rate."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .addr import Address, Prefix, PrefixTable


class EmptyCandidates(ValueError):
    pass


class ZeroBaseline(ValueError):
    pass


class EmptySet(ValueError):
    pass


def hit_rate(candidates: Iterable[Address], actives: Iterable[Address], seeds: Iterable[Address]) -> float:
    """|C∩T − C∩S| / |C| over unique candidates."""
    c = set(candidates)
    if not c:
        raise EmptyCandidates("hit rate is undefined for an empty candidate set")
    t = set(actives)
    s = set(seeds)
    return len((c & t) - (c & s)) / len(c)


def cover_num(actives: Iterable[Address], prefix_table: PrefixTable | Iterable[Prefix]) -> int:
    """Distinct table prefixes that contain at least one active."""
    if not isinstance(prefix_table, PrefixTable):
        prefix_table = PrefixTable(prefix_table)
    covered = {prefix_table.lookup(a) for a in actives}
    covered.discard(None)
    return len(covered)


def conversion_gain(p_pct: float, hr_pre2: float, hr_tau2: float, hr_tau1: float) -> float:
    """(p·HR_pre + (100−p)·HR_tau2) / (100·HR_tau1) − 1."""
    if hr_tau1 <= 0:
        raise ZeroBaseline("single-stage hit rate must be positive")
    if not 0 < p_pct < 100:
        raise ValueError("p_pct must lie strictly between 0 and 100")
    return (p_pct * hr_pre2 + (100 - p_pct) * hr_tau2) / (100 * hr_tau1) - 1


def conversion_rate(prefix_counts: Mapping[Prefix, int], threshold: int = 10) -> float:
    """Share of prefixes holding strictly more than ``threshold`` addresses."""
    if not prefix_counts:
        raise EmptySet("conversion rate needs at least one prefix")
    return sum(1 for c in prefix_counts.values() if c > threshold) / len(prefix_counts)


@dataclass
class RoundStats:
    round: int
    budget_spent: int
    actives_found: int
    hit_rate: float
    cover_num: int


@dataclass
class EvalReport:
    hit_rate: float = 0.0
    cover_num: int = 0
    budget: int = 0
    budget_spent: int = 0
    actives_found: int = 0
    rounds: list[RoundStats] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def write_rounds_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "budget_spent", "actives_found", "hit_rate", "cover_num"])
            for r in self.rounds:
                w.writerow([r.round, r.budget_spent, r.actives_found, repr(r.hit_rate), r.cover_num])
