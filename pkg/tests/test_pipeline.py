import json

import pytest

from sixvision.addr import Address, PrefixTable, parse_prefix
from sixvision.oracle import SyntheticProber, build_universe
from sixvision.pipeline import (RunConfig, RunState, export_dataset, prepare, run_6vision, run_ablation,
                                run_two_stage, write_run_artifacts)

SPEC = {"universe_seed": 3, "prefixes": [
    {"prefix": "2001:db8:1::/48", "scheme": "counter-low64", "params": {"count": 40}, "seeds": 6, "bias": "first"},
    {"prefix": "2001:db8:2::/48", "scheme": "random-sparse", "params": {"density": 0.5, "span": 8},
     "seeds": 6, "bias": "random"},
    {"prefix": "2001:db8:3::/48", "scheme": "aliased", "params": {}, "seeds": 3}]}

TINY = dict(k=2, train_epochs=2, vae_epochs=2, fine_tune_epochs=1, hidden_channels=8, n_blocks=2,
            attempt_factor=5)


@pytest.fixture(scope="module")
def world():
    return build_universe(SPEC)


def test_config_roundtrip(tmp_path):
    cfg = RunConfig(budget=500, seed=3)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert RunConfig.from_json(tmp_path / "c.json") == cfg
    with pytest.raises(ValueError):
        RunConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        RunConfig(budget=0)


def test_cadence_scaling():
    assert RunConfig(budget=250_000).cadence == 25_000
    assert RunConfig(budget=20_000).cadence == 2_000
    assert RunConfig(budget=1_000).cadence == 500
    assert RunConfig(budget=1_000, feedback_cadence=300).cadence == 300


def test_run_respects_budget(world):
    u, seeds = world
    cfg = RunConfig(budget=400, feedback_cadence=200, **TINY)
    res = run_6vision(seeds, SyntheticProber(u), cfg)
    r = res.report
    assert r.budget_spent <= 400
    assert len(set(res.state.candidates)) == len(res.state.candidates)
    assert not set(res.state.candidates) & set(seeds)
    assert 0 <= r.hit_rate <= 1
    assert [x.budget_spent for x in r.rounds] == sorted(x.budget_spent for x in r.rounds)
    # nothing under the aliased prefix counts as a hit
    alias = parse_prefix("2001:db8:3::/48")
    assert not any(alias.contains(a) for a in res.actives)


def test_single_round_skips_fine_tune(world):
    u, seeds = world
    cfg = RunConfig(budget=100, feedback_cadence=500, **TINY)
    res = run_6vision(seeds, SyntheticProber(u), cfg)
    assert len(res.report.rounds) == 1
    assert all(m.n_fine_tunes_ == 0 for m in res.state.models.values())


def test_two_stage_precondition(world):
    u, seeds = world
    with pytest.raises(ValueError):
        run_two_stage(seeds, SyntheticProber(u), RunConfig(budget=100, **TINY))
    with pytest.raises(ValueError):
        run_two_stage(seeds, SyntheticProber(u), RunConfig(budget=1, p_pct=25, **TINY))


def test_two_stage_runs(world):
    u, seeds = world
    res = run_two_stage(seeds, SyntheticProber(u), RunConfig(budget=400, p_pct=25, **TINY))
    assert res.stage1.report.budget_spent <= 100
    assert res.hr_tau1 > 0
    assert res.cg == pytest.approx((25 * res.hr_pre2 + 75 * res.hr_tau2) / (100 * res.hr_tau1) - 1)


def test_ablation_configs(world):
    u, seeds = world
    out = run_ablation(seeds, SyntheticProber(u), RunConfig(budget=150, **TINY), configs=["full", "neither"])
    assert set(out) == {"full", "neither"}


def _state_with(actives, aliased, seeds):
    table = PrefixTable([parse_prefix("2001:db8:1::/48"), parse_prefix("2001:db8:3::/48")])
    st = RunState(tuple(seeds), table)
    st.actives = list(actives)
    st.aliased_actives = list(aliased)
    return st


def test_export_alias_retention(tmp_path):
    base1 = parse_prefix("2001:db8:1::/48").base.value
    base3 = parse_prefix("2001:db8:3::/48").base.value
    seeds = [Address(base1), Address(base3 + 1)]
    actives = [Address(base1 + i) for i in range(1, 30)]
    aliased = [Address(base3 + (i << 40) + 7) for i in range(500)]
    summary = export_dataset(_state_with(actives, aliased, seeds), tmp_path)
    lines = (tmp_path / "actives.txt").read_text().split()
    under3 = [a for a in lines if a.startswith("2001:db8:3:")]
    assert len(under3) == 10
    assert len(lines) == 29 + 10
    assert summary["cr"] == 1.0  # both prefixes end with more than 10 addresses


def test_export_without_alias(tmp_path):
    base1 = parse_prefix("2001:db8:1::/48").base.value
    actives = [Address(base1 + i) for i in range(1, 5)]
    summary = export_dataset(_state_with(actives, [], [Address(base1)]), tmp_path)
    assert summary["exported"] == 4
    assert summary["cr"] == 0.0


def test_artifacts_deterministic(world, tmp_path):
    u, seeds = world
    cfg = RunConfig(budget=200, feedback_cadence=100, **TINY)
    for name in ("a", "b"):
        write_run_artifacts(run_6vision(seeds, SyntheticProber(u), cfg), tmp_path / name, cfg)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    sidecar = json.loads(next((tmp_path / "a" / "candidates").glob("*.json")).read_text())
    assert set(sidecar) == {"subclass", "round", "seed", "count"}
