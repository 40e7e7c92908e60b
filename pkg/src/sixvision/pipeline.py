"""End-to-end runs: cluster, stitch, train per-subclass models, then
generate / probe / dealias / fine-tune rounds until the budget is spent."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import imgcode
from .addr import Address, Prefix, PrefixTable, SeedSet, format_address, write_hitlist
from .baseline import EntropyTreeGenerator
from .metrics import EvalReport, RoundStats, conversion_gain, conversion_rate, cover_num, hit_rate
from .oracle import Prober, SyntheticUniverse
from .pixelgen import CandidateBatch, DedupLedger, GenerationStalled, PixelCNNGenerator
from .vaecluster import VaeKMeans

logger = logging.getLogger(__name__)

FULL_SCALE_CADENCE = 25_000
RETAINED_PER_ALIAS = 10


@dataclass
class RunConfig:
    budget: int = 20_000
    k: int = 6
    feedback: bool = True
    stitch: bool = True
    feedback_cadence: int | None = None
    fine_tune_epochs: int = 10
    train_epochs: int = 40
    batch: int = 64
    vae_epochs: int = 200
    latent_dim: int = 16
    stitch_fanout: int = 5
    stitch_mode: str = "sequential"
    hidden_channels: int = 16
    n_blocks: int = 5
    learning_rate: float = 2e-3
    temperature: float = 1.0
    replay_ratio: float = 1.0
    fine_tune_cap: int | None = 256
    attempt_factor: int = 20
    cross_route: bool = False
    alias_len: int = 96
    entropy_mode: str = "standard"
    p_pct: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.p_pct is not None and not 0 < self.p_pct < 100:
            raise ValueError("p_pct must lie strictly between 0 and 100")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def cadence(self) -> int:
        """Candidates per feedback round; the full-scale 25k is scaled down for
        budgets below 250k."""
        if self.feedback_cadence is not None:
            return self.feedback_cadence
        if self.budget >= 10 * FULL_SCALE_CADENCE:
            return FULL_SCALE_CADENCE
        return max(self.budget // 10, 500)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown RunConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunState:
    seeds: tuple[Address, ...]
    table: PrefixTable
    labels: dict[Address, int] = field(default_factory=dict)
    models: dict[int, PixelCNNGenerator] = field(default_factory=dict)
    live: list[int] = field(default_factory=list)
    dedup: DedupLedger = field(default_factory=DedupLedger)
    batches: list[CandidateBatch] = field(default_factory=list)
    candidates: list[Address] = field(default_factory=list)
    actives: list[Address] = field(default_factory=list)
    aliased_actives: list[Address] = field(default_factory=list)
    report: EvalReport = field(default_factory=EvalReport)
    round: int = 0


@dataclass
class RunResult:
    report: EvalReport
    actives: list[Address]
    state: RunState


def _apportion(total: int, weights: Sequence[float]) -> list[int]:
    s = float(sum(weights))
    raw = [total * w / s for w in weights]
    out = [int(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - out[i]), i))
    for i in order[: total - sum(out)]:
        out[i] += 1
    return out


def _sub_seed(cfg: RunConfig, *parts: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, *parts]).generate_state(1)[0])


def _seed_list(seeds) -> tuple[tuple[Address, ...], PrefixTable | None]:
    if isinstance(seeds, SeedSet):
        table = PrefixTable({p for p in seeds.prefix_index.values() if p.length > 0})
        return seeds.addresses, table
    return tuple(sorted(set(seeds))), None


def prepare(seeds, cfg: RunConfig, table: PrefixTable | None = None) -> RunState:
    """Cluster the seeds and train one generator per subclass."""
    addresses, seed_table = _seed_list(seeds)
    state = RunState(addresses, table or seed_table or PrefixTable())
    k = cfg.k
    if len(addresses) < k:
        logger.warning("only %d seeds; lowering k from %d", len(addresses), k)
        k = max(1, len(addresses))
    if k > 1:
        clusterer = VaeKMeans(k, cfg.latent_dim, cfg.vae_epochs, cfg.batch, random_state=cfg.seed)
        labels = clusterer.fit(list(addresses)).labels_
    else:
        labels = np.zeros(len(addresses), dtype=int)
    state.labels = {a: int(c) for a, c in zip(addresses, labels)}
    for c in range(k):
        members = [a for a in addresses if state.labels[a] == c]
        gen = PixelCNNGenerator(cfg.hidden_channels, cfg.n_blocks, cfg.train_epochs, cfg.batch,
                                cfg.learning_rate, cfg.stitch, cfg.stitch_fanout, cfg.stitch_mode,
                                cfg.temperature, cfg.fine_tune_epochs, cfg.replay_ratio,
                                fine_tune_cap=cfg.fine_tune_cap, random_state=_sub_seed(cfg, 1, c) % (2**31))
        state.models[c] = gen.fit(members)
        logger.info("subclass %d: %d seeds, final loss %.4f", c, len(members), gen.loss_history_[-1])
    state.live = sorted(state.models)
    state.dedup = DedupLedger(addresses)
    return state


def _generate_round(state: RunState, cfg: RunConfig, quota: int) -> list[CandidateBatch]:
    sizes = {c: sum(1 for v in state.labels.values() if v == c) for c in state.live}
    shares = dict(zip(state.live, _apportion(quota, [sizes[c] for c in state.live]))) if state.live else {}
    batches: dict[int, CandidateBatch] = {}
    owed = 0
    for c in list(state.live):
        want = shares[c]
        if not want:
            continue
        try:
            b = state.models[c].sample(want, _sub_seed(cfg, 2, state.round, c), state.dedup,
                                       cfg.attempt_factor, c, state.round)
        except GenerationStalled as exc:
            b = exc.batch
            owed += want - len(b)
            state.live.remove(c)
            logger.info("subclass %d stalled in round %d; disabled", c, state.round)
        batches[c] = b
    attempt = 0
    while owed > 0 and state.live:
        # redistribute round-robin over the subclasses still live
        attempt += 1
        extra = dict(zip(state.live, _apportion(owed, [1] * len(state.live))))
        owed = 0
        for c in list(state.live):
            want = extra[c]
            if not want:
                continue
            try:
                b = state.models[c].sample(want, _sub_seed(cfg, 3, state.round, c, attempt), state.dedup,
                                           cfg.attempt_factor, c, state.round)
            except GenerationStalled as exc:
                b = exc.batch
                owed += want - len(b)
                state.live.remove(c)
            if c in batches:
                batches[c].addresses.extend(b.addresses)
                batches[c].attempts += b.attempts
            else:
                batches[c] = b
    return [batches[c] for c in sorted(batches)]


def _dealias(prober: Prober, actives: Iterable[Address], alias_len: int) -> tuple[list, list]:
    real, aliased = [], []
    for a in actives:
        (aliased if prober.is_aliased(Prefix.of(a, alias_len)) else real).append(a)
    return real, aliased


def _alias_evidence(prober: Prober, aliased: Iterable[Address], alias_len: int, known: set) -> list[Address]:
    """Responsive alias-check probes under the same regions as ``aliased``,
    so every detected alias has enough addresses to retain on export."""
    evidence = getattr(getattr(prober, "ledger", None), "alias_evidence", {})
    out = []
    for p in dict.fromkeys(Prefix.of(a, alias_len) for a in aliased):
        out.extend(a for a in evidence.get(p, ()) if a not in known)
    return out


def run_6vision(seeds, prober: Prober, cfg: RunConfig, table: PrefixTable | None = None,
                state: RunState | None = None) -> RunResult:
    """Full generation loop under ``cfg.budget`` unique probes."""
    state = state or prepare(seeds, cfg, table)
    seed_set = set(state.seeds)
    spent = 0
    while spent < cfg.budget and state.live:
        quota = min(cfg.cadence, cfg.budget - spent)
        batches = _generate_round(state, cfg, quota)
        round_candidates = [a for b in batches for a in b.addresses]
        if not round_candidates:
            break
        verdicts = prober.probe(round_candidates)
        spent += len(round_candidates)
        state.batches.extend(batches)
        state.candidates.extend(round_candidates)
        found = [v.address for v in verdicts if v.active and v.address not in seed_set]
        real, aliased = _dealias(prober, found, cfg.alias_len)
        state.actives.extend(real)
        state.aliased_actives.extend(aliased)
        known = set(state.aliased_actives)
        state.aliased_actives.extend(_alias_evidence(prober, aliased, cfg.alias_len, known))
        state.report.rounds.append(RoundStats(
            state.round, spent, len(state.actives),
            hit_rate(state.candidates, state.actives, seed_set),
            cover_num(state.actives, state.table)))
        logger.info("round %d: %d candidates, %d actives (%d aliased)", state.round,
                    len(round_candidates), len(real), len(aliased))
        if cfg.feedback and spent < cfg.budget:
            _feedback(state, batches, set(real), cfg)
        state.round += 1

    r = state.report
    r.budget = cfg.budget
    r.budget_spent = spent
    r.actives_found = len(state.actives)
    r.hit_rate = hit_rate(state.candidates, state.actives, seed_set) if state.candidates else 0.0
    r.cover_num = cover_num(state.actives, state.table)
    r.extra = {"aliased_actives": len(state.aliased_actives), "rounds": state.round,
               "disabled_subclasses": sorted(set(state.models) - set(state.live)),
               "subclass_sizes": {str(c): sum(1 for v in state.labels.values() if v == c)
                                  for c in sorted(state.models)}}
    return RunResult(r, list(state.actives), state)


def _feedback(state: RunState, batches: list[CandidateBatch], real: set[Address], cfg: RunConfig) -> None:
    if cfg.cross_route:
        hits = sorted(real)
        routed = {c: hits for c in state.live} if hits else {}
    else:
        routed = {}
        for b in batches:
            hits = [a for a in b.addresses if a in real]
            if hits:
                routed.setdefault(b.origin, []).extend(hits)
    for c, hits in sorted(routed.items()):
        if c in state.live:
            state.models[c].partial_fit(hits)


@dataclass
class TwoStageResult:
    cg: float
    hr_pre2: float
    hr_tau2: float
    hr_tau1: float
    p_pct: float
    stage1: RunResult
    cover_two_stage: int
    cover_tau_alone: int

    def to_dict(self) -> dict:
        return {"cg": self.cg, "hr_pre2": self.hr_pre2, "hr_tau2": self.hr_tau2, "hr_tau1": self.hr_tau1,
                "p_pct": self.p_pct, "cover_two_stage": self.cover_two_stage,
                "cover_tau_alone": self.cover_tau_alone, "stage1": self.stage1.report.to_dict()}


def _probe_baseline(prober: Prober, tau, seeds: Sequence[Address], budget: int,
                    exclude: Iterable[Address], alias_len: int) -> tuple[float, list[Address]]:
    tau.fit(seeds)
    cands = tau.generate(budget, exclude).addresses
    if not cands:
        return 0.0, []
    verdicts = prober.probe(cands)
    seed_set = set(seeds)
    real, _ = _dealias(prober, [v.address for v in verdicts if v.active and v.address not in seed_set], alias_len)
    return hit_rate(cands, real, seed_set), real


def run_two_stage(seeds, prober, cfg: RunConfig, tau=None, table: PrefixTable | None = None) -> TwoStageResult:
    """Spend p% of the budget on the learned generator, the rest on ``tau``
    seeded with the enriched set, and compare against ``tau`` alone.

    ``prober`` must offer ``fresh()`` so the single-stage comparison run
    probes against an empty ledger.
    """
    if cfg.p_pct is None:
        raise ValueError("two-stage mode needs cfg.p_pct")
    stage1_budget = int(round(cfg.budget * cfg.p_pct / 100))
    if stage1_budget <= 0 or stage1_budget >= cfg.budget:
        raise ValueError("p_pct leaves one of the stages without budget")
    tau = tau or EntropyTreeGenerator(widen=True)
    addresses, seed_table = _seed_list(seeds)
    table = table or seed_table or PrefixTable()

    stage1 = run_6vision(seeds, prober, cfg.replace(budget=stage1_budget), table)
    hr_pre2 = stage1.report.hit_rate
    enriched = sorted(set(addresses) | set(stage1.actives))
    hr_tau2, found2 = _probe_baseline(prober, tau, enriched, cfg.budget - stage1_budget,
                                      stage1.state.candidates, cfg.alias_len)

    alone = prober.fresh()
    hr_tau1, found1 = _probe_baseline(alone, tau, list(addresses), cfg.budget, (), cfg.alias_len)
    cg = conversion_gain(cfg.p_pct, hr_pre2, hr_tau2, hr_tau1)
    return TwoStageResult(cg, hr_pre2, hr_tau2, hr_tau1, cfg.p_pct, stage1,
                          cover_num(set(stage1.actives) | set(found2), table), cover_num(found1, table))


ABLATIONS = {
    "full": {"stitch": True, "feedback": True},
    "no-stitch": {"stitch": False, "feedback": True},
    "no-feedback": {"stitch": True, "feedback": False},
    "neither": {"stitch": False, "feedback": False},
}


def run_ablation(seeds, prober, cfg: RunConfig, table: PrefixTable | None = None,
                 configs: Iterable[str] = ABLATIONS) -> dict[str, RunResult]:
    """Same seeds, fresh probe ledger per configuration.

    Initial training only depends on the stitching switch, so configurations
    that share it start from copies of one prepared state.
    """
    out = {}
    prepared: dict[bool, RunState] = {}
    for name in configs:
        run_cfg = cfg.replace(**ABLATIONS[name])
        if run_cfg.stitch not in prepared:
            prepared[run_cfg.stitch] = prepare(seeds, run_cfg, table)
        p = prober.fresh() if hasattr(prober, "fresh") else prober
        out[name] = run_6vision(seeds, p, run_cfg, table, copy.deepcopy(prepared[run_cfg.stitch]))
    return out


def random_baseline_rate(universe: SyntheticUniverse, prefixes: Iterable[Prefix]) -> float:
    """Expected HitRate of uniform draws spread evenly over ``prefixes``;
    aliased prefixes contribute nothing since their answers are filtered."""
    rates = []
    for p in prefixes:
        ps = universe._by_prefix.get(p)
        if ps is None or ps.scheme == "aliased":
            rates.append(0.0)
        else:
            rates.append(universe.active_count(p) / p.size)
    return float(np.mean(rates)) if rates else 0.0


def export_dataset(state: RunState, out: str | Path, few_seed_threshold: int = 10) -> dict:
    """Write the enriched hitlist, per-prefix counts, and a conversion summary.

    Aliased actives are kept only for prefixes that have no other actives,
    and then only the first ten.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    by_prefix: dict[Prefix, list[Address]] = {}
    for a in state.actives:
        by_prefix.setdefault(state.table.assign(a), []).append(a)
    aliased_by_prefix: dict[Prefix, list[Address]] = {}
    for a in state.aliased_actives:
        aliased_by_prefix.setdefault(state.table.assign(a), []).append(a)
    for p, addrs in aliased_by_prefix.items():
        if p not in by_prefix:
            by_prefix[p] = sorted(addrs)[:RETAINED_PER_ALIAS]
    exported = sorted(a for addrs in by_prefix.values() for a in addrs)
    write_hitlist(exported, out / "actives.txt")

    seed_counts: dict[Prefix, int] = {}
    for a in state.seeds:
        p = state.table.assign(a)
        seed_counts[p] = seed_counts.get(p, 0) + 1
    post = {p: seed_counts.get(p, 0) + len(by_prefix.get(p, [])) for p in set(seed_counts) | set(by_prefix)}
    with open(out / "prefix_counts.csv", "w") as fh:
        fh.write("prefix,seeds,found,total\n")
        for p in sorted(post):
            fh.write(f"{p},{seed_counts.get(p, 0)},{len(by_prefix.get(p, []))},{post[p]}\n")
    few = {p: post[p] for p, c in seed_counts.items() if c < few_seed_threshold}
    summary = {"exported": len(exported), "few_seed_prefixes": len(few),
               "converted": sum(1 for c in few.values() if c > 10),
               "cr": conversion_rate(few) if few else 0.0,
               "aliased_prefixes_retained": sorted(str(p) for p in aliased_by_prefix if p not in
                                                   {state.table.assign(a) for a in state.actives})}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def write_run_artifacts(result: RunResult, out: str | Path, cfg: RunConfig) -> None:
    """Report JSON, round CSV, and one hitlist + JSON sidecar per candidate batch."""
    out = Path(out)
    (out / "candidates").mkdir(parents=True, exist_ok=True)
    result.report.write_json(out / "report.json")
    result.report.write_rounds_csv(out / "rounds.csv")
    files = []
    for b in result.state.batches:
        stem = f"round{b.generation_round:03d}_subclass{b.origin}"
        write_hitlist(b.addresses, out / "candidates" / f"{stem}.txt")
        sidecar = {"subclass": b.origin, "round": b.generation_round, "seed": cfg.seed,
                   "count": len(b.addresses)}
        (out / "candidates" / f"{stem}.json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
        files.append(f"candidates/{stem}.txt")
    write_hitlist(result.actives, out / "actives.txt")
    write_hitlist(result.state.aliased_actives, out / "aliased.txt")
    manifest = {"config": cfg.to_dict(),
                "files": ["report.json", "rounds.csv", "actives.txt", "aliased.txt", *files]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def entropy_summary(addresses: Sequence[Address], labels: dict[Address, int], mode: str = "standard") -> dict:
    """CE of the union and of each subclass."""
    union = imgcode.set_entropy(addresses, mode).ce
    subs = {}
    for c in sorted(set(labels.values())):
        members = [a for a in addresses if labels.get(a) == c]
        if members:
            subs[c] = imgcode.set_entropy(members, mode).ce
    return {"union": union, "subclasses": subs, "mean_subclass": float(np.mean(list(subs.values())))}
