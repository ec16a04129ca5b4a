"""Command-line entry point: ``metaepi gen-pool | train | eval | experiment``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .metamodels import MetaModel, load_model, save_model
from .metatrain import evaluate_meta_model, meta_train
from .taskgen import EpisodeSpec, RngStream, read_pool, write_pool


def _gen_pool(args) -> int:
    cfg = harness.load_config(args.config)
    pool = harness.build_pool(cfg.pool, RngStream(cfg.seeds[0]).child("pool"))
    write_pool(pool, args.out)
    print(f"wrote {len(pool)} instances, {pool.num_classes} classes, {pool.num_domains} domain(s) to {args.out}")
    return 0


def _train(args) -> int:
    cfg = harness.load_config(args.config)
    pool = read_pool(args.pool)
    if pool.feature_dim != cfg.pool.dim:
        raise harness.ConfigError(f"pool has dim {pool.feature_dim} but config pool.dim is {cfg.pool.dim}")
    seed = cfg.seeds[0]
    model = MetaModel.create(cfg.variant, cfg.widths(), RngStream(seed).child("model"), ways=cfg.episode.ways,
                             alpha=cfg.model.alpha, steps=cfg.model.steps, tau=cfg.model.tau)
    trained, curve = meta_train(model, pool, cfg.train_config(seed))
    save_model(trained, args.out)
    if curve:
        last = curve[-1]
        print(f"epoch {last.epoch}: meta_train_loss={last.meta_train_loss!r} meta_train_acc={last.meta_train_acc!r}")
    print(f"saved {cfg.variant} model to {args.out}")
    return 0


def _eval(args) -> int:
    model = load_model(args.model)
    pool = read_pool(args.pool)
    spec = EpisodeSpec(args.ways, args.shots, args.val_per_class, args.source_domain, args.target_domain)
    rep = evaluate_meta_model(model, pool, spec, args.episodes, args.seed)
    print(f"meta_test_acc={rep.mean!r} ci_halfwidth={rep.ci95!r} episodes={rep.episodes}")
    return 0


def _experiment(args) -> int:
    cfg = harness.load_config(args.config)
    if cfg.experiment != args.id:
        raise harness.ConfigError(f"config is for experiment {cfg.experiment!r}, not {args.id!r}")
    records = harness.run_experiment(cfg, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaepi", description="Episodic meta-learning experiments on synthetic pools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-pool", help="generate the configured class pool")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_gen_pool)

    t = sub.add_parser("train", help="meta-train a model on a pool file")
    t.add_argument("--config", required=True)
    t.add_argument("--pool", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a saved model on fresh episodes")
    e.add_argument("--model", required=True)
    e.add_argument("--pool", required=True)
    e.add_argument("--episodes", type=int, default=500)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--ways", type=int, default=5)
    e.add_argument("--shots", type=int, default=1)
    e.add_argument("--val-per-class", type=int, default=15)
    e.add_argument("--source-domain", type=int, default=0)
    e.add_argument("--target-domain", type=int, default=0)
    e.set_defaults(func=_eval)

    x = sub.add_parser("experiment", help="run an experiment recipe and write its CSV")
    x.add_argument("id", choices=harness.EXPERIMENTS)
    x.add_argument("--config", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as e:
        msg = str(e).splitlines()[0] if str(e) else e.__class__.__name__
        print(f"metaepi: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
