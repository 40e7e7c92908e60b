"""Ready-made synthetic universe specs used by tests, the CLI, and the
acceptance suite."""

from __future__ import annotations

import numpy as np

FAMILIES = ("counter", "word", "sparse")


def _prefix_bases(n: int, rng: np.random.Generator, blocks: int = 4) -> list[str]:
    """/48 bases carved from a handful of /32 allocations, the way registries
    hand out consecutive customer blocks."""
    heads = set()
    while len(heads) < blocks:
        heads.add((int(rng.integers(0x2001, 0x2c0f)), int(rng.integers(0, 0x10000))))
    out = set()
    for i, (a, b) in enumerate(sorted(heads)):
        share = n // blocks + (i < n % blocks)
        start = int(rng.integers(0, 0x100 - share))
        out.update(f"{a:x}:{b:x}:{start + j:x}" for j in range(share))
    return sorted(out)


def _full(groups: str) -> str:
    return ":".join(f"{int(g, 16):04x}" for g in groups.split(":"))


def family_entry(family: str, base: str, seeds: int, biased: bool = True) -> dict:
    """One /48 with the activity scheme of ``family``."""
    prefix = f"{base}::/48"
    head = _full(base)
    if family == "counter":
        return {"prefix": prefix, "scheme": "counter-low64", "params": {"count": 64, "subnets": 4},
                "seeds": seeds, "bias": "first" if biased else "random"}
    if family == "word":
        template = f"{head}:000*:0000:0000:00**:0000"
        bias = {"kind": "restrict", "nybble": 15, "values": [0], "then": "random"} if biased else "random"
        return {"prefix": prefix, "scheme": "word-pattern",
                "params": {"template": template, "density": 0.5}, "seeds": seeds, "bias": bias}
    if family == "sparse":
        return {"prefix": prefix, "scheme": "random-sparse", "params": {"density": 0.3, "span": 16},
                "seeds": seeds, "bias": "random"}
    if family == "aliased":
        return {"prefix": prefix, "scheme": "aliased", "params": {}, "seeds": seeds}
    raise ValueError(f"unknown family {family!r}")


def standard_universe_spec(universe_seed: int = 2024, n_prefixes: int = 40, seeds_per_prefix: int = 5) -> dict:
    """The biased few-seed universe: counter, word and sparse families plus
    two aliased prefixes; seeds reveal only a corner of each pattern."""
    rng = np.random.default_rng(universe_seed)
    bases = _prefix_bases(n_prefixes, rng)
    n_alias = 2
    kinds = [FAMILIES[i % len(FAMILIES)] for i in range(n_prefixes - n_alias)] + ["aliased"] * n_alias
    order = rng.permutation(n_prefixes)
    entries = [family_entry(kinds[i], bases[j], seeds_per_prefix) for i, j in zip(range(n_prefixes), order)]
    return {"universe_seed": universe_seed, "prefixes": entries}


def family_corpus_spec(universe_seed: int = 7, prefixes_per_family: int = 10, seeds_per_prefix: int = 10) -> dict:
    """Three families, unbiased seeds; 300 seeds with the defaults.

    All prefixes share one /32 so that families differ by addressing style
    rather than by allocation.
    """
    rng = np.random.default_rng(universe_seed)
    bases = _prefix_bases(3 * prefixes_per_family, rng, blocks=1)
    entries = []
    for i, fam in enumerate(FAMILIES):
        for base in bases[i::3][:prefixes_per_family]:
            entries.append(family_entry(fam, base, seeds_per_prefix, biased=False))
    return {"universe_seed": universe_seed, "prefixes": entries}


def family_of(spec: dict) -> dict[str, str]:
    """Prefix text -> family name for a spec built here."""
    names = {"counter-low64": "counter", "word-pattern": "word", "random-sparse": "sparse",
             "aliased": "aliased"}
    return {e["prefix"]: names[e["scheme"]] for e in spec["prefixes"]}
