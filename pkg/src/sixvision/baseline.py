"""Simplified entropy space-tree target generator.

Seeds are split top-down on the varying nybble with the lowest entropy.
Generation treats the parents of leaves as candidate regions (their varying
nybbles become wildcards), hands out budget in proportion to seed density,
and, when asked to, widens every region by one more nybble once all of
them are exhausted.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .addr import Address, EmptySeedSet
from .pixelgen import CandidateBatch

NYBBLES = 32


def nybble_entropy(values: Iterable[int]) -> float:
    """Shannon entropy of nybble values, normalised by log2(16)."""
    counts = Counter(values)
    total = sum(counts.values())
    h = -sum(c / total * math.log2(c / total) for c in counts.values())
    return h / 4.0


@dataclass
class SpaceTreeNode:
    seeds: tuple[Address, ...]
    fixed_nybbles: dict[int, int]
    split_position: int | None = None
    children: dict[int, "SpaceTreeNode"] = field(default_factory=dict)

    @property
    def seed_count(self) -> int:
        return len(self.seeds)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def free_positions(self) -> list[int]:
        return [i for i in range(NYBBLES) if i not in self.fixed_nybbles]

    def walk(self) -> Iterator["SpaceTreeNode"]:
        yield self
        for child in self.children.values():
            yield from child.walk()

    def leaves(self) -> list["SpaceTreeNode"]:
        return [n for n in self.walk() if n.is_leaf]


def _node(seeds: tuple[Address, ...]) -> SpaceTreeNode:
    columns = list(zip(*(a.nybbles for a in seeds)))
    fixed = {i: col[0] for i, col in enumerate(columns) if len(set(col)) == 1}
    return SpaceTreeNode(seeds, fixed)


def build_tree(seeds: Iterable[Address]) -> SpaceTreeNode:
    uniq = tuple(sorted(set(seeds)))
    if not uniq:
        raise EmptySeedSet("cannot build a space tree without seeds")
    root = _node(uniq)
    stack = [root]
    while stack:
        node = stack.pop()
        free = node.free_positions
        if node.seed_count == 1 or not free:
            continue
        ent = {i: nybble_entropy(a.nybbles[i] for a in node.seeds) for i in free}
        pos = min(free, key=lambda i: (ent[i], i))
        node.split_position = pos
        groups: dict[int, list[Address]] = {}
        for a in node.seeds:
            groups.setdefault(a.nybbles[pos], []).append(a)
        for value in sorted(groups):
            child = _node(tuple(groups[value]))
            node.children[value] = child
            stack.append(child)
    return root


class _Region:
    def __init__(self, fixed: dict[int, int], seed_count: int):
        self.fixed = dict(fixed)
        self.free = [i for i in range(NYBBLES) if i not in fixed]
        self.seed_count = seed_count
        self._iter = self._enumerate()
        self.exhausted = False

    @property
    def key(self):
        return tuple(sorted(self.fixed.items()))

    @property
    def density(self) -> float:
        return self.seed_count / 16.0 ** len(self.free)

    def _enumerate(self) -> Iterator[Address]:
        base = [self.fixed.get(i, 0) for i in range(NYBBLES)]
        for digits in itertools.product(range(16), repeat=len(self.free)):
            for pos, d in zip(self.free, digits):
                base[pos] = d
            yield Address.from_nybbles(base)

    def take(self, n: int, skip: set[Address]) -> list[Address]:
        out = []
        while len(out) < n:
            a = next(self._iter, None)
            if a is None:
                self.exhausted = True
                break
            if a not in skip:
                skip.add(a)
                out.append(a)
        return out

    def widened(self) -> "_Region | None":
        if not self.fixed:
            return None
        fixed = dict(self.fixed)
        del fixed[max(fixed)]
        return _Region(fixed, self.seed_count)


def _initial_regions(tree: SpaceTreeNode) -> list[_Region]:
    if tree.is_leaf:
        return [_Region(tree.fixed_nybbles, tree.seed_count)]
    regions = {}
    for node in tree.walk():
        if node.children and any(c.is_leaf for c in node.children.values()):
            r = _Region(node.fixed_nybbles, node.seed_count)
            regions.setdefault(r.key, r)
    return list(regions.values())


def _apportion(total: int, weights: list[float]) -> list[int]:
    s = sum(weights)
    raw = [total * w / s for w in weights]
    out = [int(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - out[i]), i))
    for i in order[: total - sum(out)]:
        out[i] += 1
    return out


def generate(tree: SpaceTreeNode, budget: int, exclude: Iterable[Address] = (),
             widen: bool = False) -> CandidateBatch:
    """Up to ``budget`` candidates, never seeds or excluded addresses.

    Without ``widen`` generation stops once every region is exhausted.
    """
    batch = CandidateBatch([])
    if budget <= 0:
        return batch
    skip = set(exclude) | set(tree.seeds)
    regions = _initial_regions(tree)
    while len(batch) < budget and regions:
        live = [r for r in regions if not r.exhausted]
        if not live:
            if not widen:
                break
            widened = {}
            for r in regions:
                w = r.widened()
                if w is None:
                    continue
                if w.key in widened:
                    widened[w.key].seed_count += w.seed_count
                else:
                    widened[w.key] = w
            regions = list(widened.values())
            continue
        shares = _apportion(budget - len(batch), [r.density for r in live])
        for r, share in zip(live, shares):
            if share:
                batch.addresses.extend(r.take(share, skip))
    return batch


class EntropyTreeGenerator(BaseEstimator):
    """Estimator wrapper: ``fit`` seeds, then ``generate(budget)``."""

    def __init__(self, widen: bool = False):
        self.widen = widen

    def fit(self, X, y=None):
        self.tree_ = build_tree(X)
        return self

    def generate(self, budget: int, exclude: Iterable[Address] = ()) -> CandidateBatch:
        check_is_fitted(self, "tree_")
        return generate(self.tree_, budget, exclude, self.widen)
