"""Command-line entry point: ``seabench {train,attack,campaign,expect,diversity}``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace


from . import data, diversity, harness, zoo
from .attack import target_labels, run_attack
from .errors import SeaBenchError


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--seed", type=int, default=None, help="base seed (default 0 or the config value)")
    p.add_argument("--out", default=None, help=out_help)


def _pool_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pool", default=None, help=f"pool directory (default {harness.DEFAULT_POOL_DIR})")


def _attack_args(p: argparse.ArgumentParser) -> None:
    _pool_arg(p)
    p.add_argument("--s", type=int, default=20, help="number of accessible surrogates")
    p.add_argument("--m", type=int, default=4, help="models per iteration")
    p.add_argument("--T", type=int, default=10, help="iterations")
    p.add_argument("--epsilon-255", type=float, default=16.0)
    p.add_argument("--alpha-255", type=float, default=None)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--baseline", default="MI")
    p.add_argument("--fusion", default="logit")
    p.add_argument("--strategy", default="random-without-replacement")
    p.add_argument("--family", default=None)
    p.add_argument("--subset", choices=harness.SUBSETS, default="random",
                   help="models of the identical strategy: first m in pool order or a draw seeded by --seed")
    p.add_argument("--targeted", action="store_true")
    p.add_argument("--eval-n", type=int, default=100)


def _spec_from_args(args, **extra) -> harness.CampaignSpec:
    return harness.CampaignSpec(
        s=args.s, m_values=(args.m,), epsilon_255=args.epsilon_255, alpha_255=args.alpha_255,
        iterations=args.T, mu=args.mu, baselines=(args.baseline,), strategies=(args.strategy,),
        fusion=args.fusion, targeted=args.targeted, eval_n=args.eval_n, seed=args.seed or 0,
        family=args.family, subset=args.subset, pool_dir=args.pool, out=args.out, **extra,
    )


def cmd_train(args) -> int:
    dataset = data.generate(args.kind, args.n, args.classes, (1, args.size, args.size), args.data_seed)
    surrogates, targets = zoo.default_specs((1, args.size, args.size), args.classes)
    out = args.out or harness.DEFAULT_POOL_DIR
    pool = zoo.train_pool(dataset, surrogates, targets, epochs=args.epochs, lr=args.lr,
                          seed=args.seed or 0, threshold=args.threshold, out_dir=out)
    for m in pool.all_models:
        print(f"{m.name}\t{m.meta['test_accuracy']:.4f}")
    print(f"pool written to {out}")
    return 0


def cmd_attack(args) -> int:
    result = harness.run_campaign(_spec_from_args(args))
    sys.stdout.write(result.to_csv() if not args.out else "")
    for row in result.rows:
        if row["error"]:
            print(f"error: {row['error']}", file=sys.stderr)
    return 0 if result.ok else 1


def cmd_campaign(args) -> int:
    spec = harness.load_config(args.config)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.out is not None:
        spec = replace(spec, out=args.out)
    if args.pool is not None:
        spec = replace(spec, pool_dir=args.pool)
    result = harness.run_campaign(spec)
    if not spec.out:
        sys.stdout.write(result.to_csv())
    for row in result.summary():
        print("{strategy}\ts={s}\tm={m}\t{baseline}\t{target_model}\tasr={asr_mean:.4f}±{asr_std:.4f}".format(**row),
              file=sys.stderr)
    return 0 if result.ok else 1


def cmd_expect(args) -> int:
    seed = args.seed or 0
    rows = [harness.verify_expectation(args.s, m, T, args.trials, seed) for m in args.m for T in args.T]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        harness.write_atomic(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0 if all(r["within_3se"] for r in rows) else 1


def cmd_diversity(args) -> int:
    pool, dataset = harness.ensure_pool(args.pool)
    surrogates = harness.surrogate_view(pool, args.s, args.family)
    seed = args.seed or 0
    ev = data.build_eval_set(dataset, surrogates + pool.targets, args.eval_n, seed)
    y = target_labels(ev.labels, dataset.classes) if args.targeted else ev.labels
    spec = _spec_from_args(args, diversity=True)
    res = run_attack(surrogates, ev.inputs, y, spec.attack_config(args.baseline, seed),
                     spec.selection(args.strategy, len(surrogates), args.m, seed))
    buf = io.StringIO()
    cols = ["strategy", "s", "m", "seed", "d_i_mean", "d_i_std", "d_c_mean", "d_c_std", "variant"]
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for variant in diversity.VARIANTS:
        rep = diversity.report(res.trace, variant)
        row = {k: harness._fmt(v) for k, v in rep.row().items()}
        writer.writerow({"strategy": spec.strategies[0], "s": len(surrogates), "m": args.m, "seed": seed, **row})
    if args.out:
        harness.write_atomic(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seabench", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the model zoo and write a pool directory")
    _common(p, "pool directory to write")
    p.add_argument("--kind", default=data.DEFAULT_KIND, choices=data.KINDS)
    p.add_argument("--n", type=int, default=data.DEFAULT_N)
    p.add_argument("--classes", type=int, default=data.DEFAULT_CLASSES)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=harness.POOL_EPOCHS)
    p.add_argument("--lr", type=float, default=harness.POOL_LR)
    p.add_argument("--threshold", type=float, default=zoo.ADMISSION_THRESHOLD)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run one Ens/SEA cell and print CSV rows")
    _common(p, "CSV output path (stdout if omitted)")
    _attack_args(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("campaign", help="run an experiment matrix from a key = value config file")
    p.add_argument("config")
    _common(p, "CSV output path (overrides io.out)")
    _pool_arg(p)
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("expect", help="check the expected number of distinct models by simulation")
    _common(p, "CSV output path (stdout if omitted)")
    p.add_argument("--s", type=int, default=20)
    p.add_argument("--m", type=int, nargs="+", default=[4])
    p.add_argument("--T", type=int, nargs="+", default=[10])
    p.add_argument("--trials", type=int, default=100_000)
    p.set_defaults(func=cmd_expect)

    p = sub.add_parser("diversity", help="gradient-similarity report for one attack run")
    _common(p, "CSV output path (stdout if omitted)")
    _attack_args(p)
    p.set_defaults(func=cmd_diversity)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SeaBenchError, FileNotFoundError) as exc:
        print(f"seabench: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
