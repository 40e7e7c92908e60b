"""Command-line front end.

Every subcommand writes its artifacts under ``--out`` and takes ``--seed``.
Exit status is 0 on success, 1 on a domain error (bad input data, failed
run) and 2 on a usage error.

File formats
  hitlist      one IPv6 address per line; '#' starts a comment
  prefixes     one CIDR prefix per line
  universe     JSON: {"universe_seed": int, "prefixes": [{"prefix", "scheme",
               "params", "seeds", "bias"}, ...]}
  verdicts     CSV with header address,active
  model        JSON checkpoint (format "sixvision-checkpoint")
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import imgcode, scenarios
from .addr import (AddressError, PrefixTable, SeedSet, few_seed_census, load_hitlist, load_prefix_table,
                   parse_address, write_hitlist)
from .metrics import cover_num, hit_rate
from .oracle import (SCANNER_ENV, InvalidSpec, ScannerConfig, ScannerProber, SyntheticProber,
                     build_universe, load_universe)
from .pipeline import (ABLATIONS, RunConfig, RunState, export_dataset, run_6vision, run_ablation,
                       run_two_stage, write_run_artifacts)
from .pixelgen import PixelCNNGenerator
from .vaecluster import VaeKMeans, write_clustering_csv

logger = logging.getLogger("sixvision")

PRESETS = {"standard": scenarios.standard_universe_spec, "families": scenarios.family_corpus_spec}


class UsageError(Exception):
    pass


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _seeds(args) -> SeedSet:
    return load_hitlist(args.hitlist, getattr(args, "prefixes", None))


def _universe(args):
    if getattr(args, "universe", None):
        return load_universe(args.universe)
    return build_universe(PRESETS[args.preset]())


def _config(args, **overrides) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {"seed": args.seed}
    for name in ("budget", "k", "train_epochs", "vae_epochs", "fine_tune_epochs", "hidden_channels"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if getattr(args, "no_feedback", False):
        changes["feedback"] = False
    if getattr(args, "no_stitch", False):
        changes["stitch"] = False
    changes.update(overrides)
    return cfg.replace(**changes)


def _prober(args, universe):
    if universe is not None:
        return SyntheticProber(universe)
    if not args.scanner:
        raise UsageError("a hitlist run needs --scanner (or use --universe/--preset for the synthetic oracle)")
    cfg = ScannerConfig(enabled=True, acknowledge_live_scanning=args.acknowledge_live_scanning,
                        binary=args.scanner_binary, rate=args.rate)
    return ScannerProber(cfg, seed=args.seed)


# -- subcommands ----------------------------------------------------------------

def cmd_encode(args) -> int:
    out = _out(args)
    addrs = [parse_address(a) for a in args.addr or []]
    if args.hitlist:
        addrs += list(load_hitlist(args.hitlist).addresses)
    if not addrs:
        raise UsageError("give --addr or --hitlist")
    images = imgcode.encode_many(addrs)
    if args.format == "pgm":
        for i, img in enumerate(images):
            imgcode.write_pgm(img, out / f"address_{i:05d}.pgm")
    else:
        with open(out / "images.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["address", "bits"])
            for a, img in zip(addrs, images):
                w.writerow([str(a), "".join(map(str, img.ravel()))])
    for a, img in zip(addrs[:args.show], images):
        print(a)
        for row in img:
            print("".join(map(str, row)))
    return 0


def cmd_entropy(args) -> int:
    out = _out(args)
    img = imgcode.set_entropy(_seeds(args).addresses, args.mode)
    img.to_pgm(out / "entropy.pgm")
    img.to_csv(out / "entropy.csv")
    _dump(out / "entropy.json", {"ce": img.ce, "mode": img.mode})
    print(f"CE {img.ce:.6f}")
    return 0


def cmd_census(args) -> int:
    out = _out(args)
    rep = few_seed_census(_seeds(args), args.threshold)
    rep.write_csv(out / "census.csv")
    _dump(out / "census.json", {"prefixes": rep.prefixes, "few_seed": rep.few_seed,
                                "ratio": rep.ratio, "threshold": rep.threshold})
    print(f"{rep.few_seed}/{rep.prefixes} prefixes below {rep.threshold} seeds ({rep.ratio:.2%})")
    return 0


def cmd_cluster(args) -> int:
    out = _out(args)
    addrs = list(_seeds(args).addresses)
    est = VaeKMeans(args.k, vae_epochs=args.vae_epochs, random_state=args.seed).fit(addrs)
    write_clustering_csv(addrs, est.labels_, out / "clusters.csv")
    subs = {}
    for c in sorted(set(int(x) for x in est.labels_)):
        members = [a for a, lab in zip(addrs, est.labels_) if lab == c]
        subs[str(c)] = {"size": len(members), "ce": imgcode.set_entropy(members).ce}
    doc = {"union_ce": imgcode.set_entropy(addrs).ce, "subclasses": subs}
    _dump(out / "clusters.json", doc)
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    out = _out(args)
    gen = PixelCNNGenerator(hidden_channels=args.hidden_channels, epochs=args.epochs,
                            stitch=not args.no_stitch, random_state=args.seed)
    gen.fit(list(_seeds(args).addresses))
    gen.save(out / "model.json")
    print(f"final loss {gen.loss_history_[-1]:.5f}")
    return 0


def cmd_generate(args) -> int:
    out = _out(args)
    gen = PixelCNNGenerator.load(args.model)
    exclude = set(load_hitlist(args.exclude).addresses) if args.exclude else set()
    batch = gen.sample(args.count, args.seed, exclude, args.attempt_factor)
    write_hitlist(batch.addresses, out / "candidates.txt")
    print(f"{len(batch)} candidates from {batch.attempts} draws")
    return 0


def cmd_universe(args) -> int:
    out = _out(args)
    spec = json.loads(Path(args.universe).read_text()) if args.universe else PRESETS[args.preset]()
    universe, seeds = build_universe(spec)
    _dump(out / "universe.json", spec)
    write_hitlist(seeds.addresses, out / "seeds.txt")
    (out / "prefixes.txt").write_text("".join(f"{ps.prefix}\n" for ps in universe.prefixes))
    with open(out / "ground_truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prefix", "scheme", "actives"])
        for ps in universe.prefixes:
            w.writerow([str(ps.prefix), ps.scheme, "" if ps.scheme == "aliased" else universe.active_count(ps.prefix)])
    print(f"{len(universe.prefixes)} prefixes, {len(seeds)} seeds")
    return 0


def _inputs(args):
    if args.hitlist:
        return None, _seeds(args)
    return _universe(args)


def cmd_run(args) -> int:
    out = _out(args)
    universe, seeds = _inputs(args)
    cfg = _config(args)
    prober = _prober(args, universe)
    result = run_6vision(seeds, prober, cfg)
    write_run_artifacts(result, out, cfg)
    if universe is not None:
        with open(out / "verdicts.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["address", "active"])
            for a in result.state.candidates:
                w.writerow([str(a), int(universe.is_active(a))])
    r = result.report
    print(f"hitrate {r.hit_rate:.5f} cover {r.cover_num} actives {r.actives_found} spent {r.budget_spent}")
    return 0


def cmd_two_stage(args) -> int:
    out = _out(args)
    universe, seeds = _universe(args)
    res = run_two_stage(seeds, SyntheticProber(universe), _config(args, p_pct=args.p))
    _dump(out / "two_stage.json", res.to_dict())
    print(f"CG {res.cg:.4f} (pre {res.hr_pre2:.5f}, tau2 {res.hr_tau2:.5f}, tau1 {res.hr_tau1:.5f})")
    return 0


def cmd_ablate(args) -> int:
    out = _out(args)
    universe, seeds = _universe(args)
    configs = args.configs or list(ABLATIONS)
    results = run_ablation(seeds, SyntheticProber(universe), _config(args), configs=configs)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "hitrate"])
        for name, res in results.items():
            w.writerow([name, repr(res.report.hit_rate)])
            print(f"{name:12s} {res.report.hit_rate:.5f}")
    return 0


def cmd_eval(args) -> int:
    out = _out(args)
    cands = list(load_hitlist(args.candidates).addresses)
    seeds = set(load_hitlist(args.seeds).addresses) if args.seeds else set()
    if args.verdicts:
        with open(args.verdicts, newline="") as fh:
            actives = {parse_address(r["address"]) for r in csv.DictReader(fh) if r["active"].strip() in ("1", "true", "True")}
        table = load_prefix_table(args.prefixes) if args.prefixes else PrefixTable()
    else:
        universe, _ = _universe(args)
        actives = {a for a in cands if universe.is_active(a)}
        table = universe.table
    found = actives - seeds
    doc = {"hit_rate": hit_rate(cands, found, seeds), "cover_num": cover_num(found, table),
           "candidates": len(set(cands)), "actives": len(found & set(cands))}
    _dump(out / "eval.json", doc)
    print(json.dumps(doc, sort_keys=True))
    return 0


def _result_list(path: Path) -> list:
    # run outputs may legitimately be empty, unlike seed hitlists
    if not path.exists() or not path.read_text().split():
        return []
    return list(load_hitlist(path).addresses)


def cmd_export(args) -> int:
    out = _out(args)
    seeds = load_hitlist(args.hitlist, args.prefixes)
    table = PrefixTable({p for p in seeds.prefix_index.values() if p.length > 0})
    run = Path(args.run)
    state = RunState(seeds.addresses, table)
    state.actives = _result_list(run / "actives.txt")
    state.aliased_actives = _result_list(run / "aliased.txt")
    summary = export_dataset(state, out, args.threshold)
    print(json.dumps(summary, sort_keys=True))
    return 0


# -- parser ----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default="out", help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed; identical seeds give identical outputs")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _hitlist(p, required=True) -> None:
    p.add_argument("--hitlist", required=required, help="address file, one per line")
    p.add_argument("--prefixes", help="prefix file for grouping seeds (default: one catch-all group)")


def _source(p) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--universe", help="universe spec JSON")
    g.add_argument("--preset", choices=sorted(PRESETS), default="standard",
                   help="built-in universe when --universe is not given (default: standard)")


def _run_flags(p) -> None:
    p.add_argument("--config", help="RunConfig JSON; flags below override it")
    p.add_argument("--budget", type=int, help="unique probe budget (default 20000)")
    p.add_argument("--k", type=int, help="number of subclasses (default 6)")
    p.add_argument("--train-epochs", type=int, help="PixelCNN epochs per subclass (default 40)")
    p.add_argument("--vae-epochs", type=int, help="VAE epochs (default 200)")
    p.add_argument("--fine-tune-epochs", type=int, help="epochs per feedback fine-tune (default 10)")
    p.add_argument("--hidden-channels", type=int, help="PixelCNN width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sixvision", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="address -> 8x16 bit image")
    p.add_argument("--addr", action="append", help="address to encode (repeatable)")
    _hitlist(p, required=False)
    p.add_argument("--format", choices=("pgm", "csv"), default="pgm",
                   help="pgm: one P2 file per address; csv: address,bits (128 chars, row-major)")
    p.add_argument("--show", type=int, default=1, help="print this many images to stdout")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("entropy", help="per-bit entropy heatmap (PGM + CSV) and CE")
    _hitlist(p)
    p.add_argument("--mode", "--entropy-mode", choices=("standard", "paper-literal"), default="standard")
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("census", help="seeds per prefix and few-seed share (CSV prefix,count)")
    _hitlist(p)
    p.add_argument("--threshold", type=int, default=10, help="few-seed means fewer than this many seeds")
    p.set_defaults(func=cmd_census)

    p = sub.add_parser("cluster", help="VAE + k-means subclasses (CSV address,subclass)")
    _hitlist(p)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--vae-epochs", type=int, default=200)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", help="fit one PixelCNN on a hitlist (writes model.json)")
    _hitlist(p)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--hidden-channels", type=int, default=32)
    p.add_argument("--no-stitch", action="store_true", help="train on single 8x16 images")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample novel candidates from a trained model")
    p.add_argument("--model", required=True, help="model.json from 'train'")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--exclude", help="hitlist of addresses never to emit")
    p.add_argument("--attempt-factor", type=int, default=20, help="draws allowed per requested address")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("universe", help="materialise a synthetic universe: spec, seeds, prefixes, truth")
    _source(p)
    p.set_defaults(func=cmd_universe)

    p = sub.add_parser("run", help="full generation loop; report, rounds, candidates, verdicts")
    _source(p)
    _hitlist(p, required=False)
    _run_flags(p)
    p.add_argument("--no-feedback", action="store_true")
    p.add_argument("--no-stitch", action="store_true")
    p.add_argument("--scanner", action="store_true",
                   help=f"probe with the external scanner named by ${SCANNER_ENV} (hitlist runs only)")
    p.add_argument("--scanner-binary", help=f"scanner path, overrides ${SCANNER_ENV}")
    p.add_argument("--acknowledge-live-scanning", action="store_true",
                   help="required with --scanner: real probes go to real networks")
    p.add_argument("--rate", default="10M", help="scanner bandwidth limit (default 10M)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("two-stage", help="conversion gain of generator + entropy-tree baseline")
    _source(p)
    _run_flags(p)
    p.add_argument("--p", type=float, default=25.0, help="percent of budget for the first stage")
    p.set_defaults(func=cmd_two_stage)

    p = sub.add_parser("ablate", help="stitching/feedback ablation (CSV config,hitrate)")
    _source(p)
    _run_flags(p)
    p.add_argument("--configs", nargs="+", choices=list(ABLATIONS))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="HitRate and CoverNum of a candidate list")
    p.add_argument("--candidates", required=True)
    p.add_argument("--seeds", help="seed hitlist excluded from hits")
    p.add_argument("--verdicts", help="CSV address,active; otherwise the universe answers")
    p.add_argument("--prefixes", help="prefix file for CoverNum with --verdicts")
    _source(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="enriched dataset from a run directory (actives, counts, CR)")
    _hitlist(p)
    p.add_argument("--run", required=True, help="output directory of 'run'")
    p.add_argument("--threshold", type=int, default=10, help="few-seed threshold")
    p.set_defaults(func=cmd_export)

    for name, sp in sub.choices.items():
        _common(sp)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sixvision {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (AddressError, InvalidSpec, ValueError, RuntimeError, OSError) as exc:
        print(f"sixvision {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
