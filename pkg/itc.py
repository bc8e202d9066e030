#!/usr/bin/env python3
"""
ITC — command line
Usage:  python itc.py <command> [options]

  gen-data        collect gridworld transitions and grow the codebook
  train-wm        collect, tokenize, train the world model, checkpoint
  eval-accuracy   per-step exact-frame accuracy, baseline vs ITC
  rollout         imagined rollout with creature persistence counts
  decode          decode one next frame from a prediction file
  sinkhorn-bench  run the solver on a cost file or random instances

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import dataclasses
import json
import logging
import sys
import time
from typing import List, Optional

import numpy as np

from _itc_common import ConfigError, GridShape, ItcError, setup_logging, substream
from evaluation import (
    OraclePredictor,
    Variant,
    WorldModelPredictor,
    compare_rollouts,
    creature_tokens,
    default_decode_config,
    episode_script,
    eval_accuracy,
    rollout,
    sweep_ot,
)
from gridworld import collect, symbol_codebook, token_symbols
from itc_decoder import FrameTokens, PredictionGrid, decode_next_frame_detailed, direct_decode
from ot_solver import (
    BENCH_COST_SCALE,
    format_plan,
    plan_summary,
    random_costs,
    read_cost_text,
    sinkhorn,
)
from pipeline import CODEBOOK_FILE, DATASET_FILE, RunConfig, train_pipeline
from render import char_rollout, frame_symbols, write_pgm, write_rollout_html
from store import (
    read_checkpoint,
    read_codebook,
    read_dataset,
    write_codebook,
    write_dataset,
    write_json,
)

logger = logging.getLogger("itc")


# ── Config handling ────────────────────────────────────────────────────────────

def load_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.tiny() if args.tiny else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.deterministic:
        overrides["deterministic"] = True
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _decode_cfg(cfg: RunConfig, shape: GridShape, sampling: Optional[str] = None):
    return default_decode_config(shape, sampling or cfg.eval.sampling, cfg.ot, cfg.bin,
                                 border=cfg.eval.border)


def _load_predictor(path: str):
    model, meta = read_checkpoint(path)
    return WorldModelPredictor(model, meta.get("codebook_hash") or None)


# ── Commands ───────────────────────────────────────────────────────────────────

def cmd_gen_data(args, cfg: RunConfig) -> int:
    episodes = args.episodes or cfg.train.episodes
    cb = symbol_codebook(cfg.tokenizer.tau, cfg.tokenizer.k_max)
    ds = collect(cfg.grid, episodes, cfg.seed, cb)
    logger.info(write_codebook(cb, cfg.path(CODEBOOK_FILE)))
    logger.info(write_dataset(ds, cfg.path(DATASET_FILE)))
    return 0


def cmd_train_wm(args, cfg: RunConfig) -> int:
    if args.data or args.codebook:
        cfg = dataclasses.replace(cfg, dataset_path=args.data, codebook_path=args.codebook)
    if args.updates:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, updates=args.updates))
    artifacts = train_pipeline(cfg)
    logger.info("checkpoint sha256 %s", artifacts["checkpoint_sha256"])
    print(json.dumps(artifacts, indent=2))
    return 0


def _averaged(predictor, variant, held_out, cfg: RunConfig, decode_cfg):
    seeds = [cfg.seed] if decode_cfg.sampling.value == "greedy" else list(cfg.eval.seeds)
    reports = [eval_accuracy(predictor, variant, held_out, s, decode_cfg) for s in seeds]
    out = reports[0].to_dict()
    if len(reports) > 1:
        for key in ("overall_accuracy", "accuracy_with_creature",
                    "accuracy_without_creature", "token_error_rate"):
            values = [getattr(r, key) for r in reports]
            out[key] = float(np.mean(values))
            out[key + "_std"] = float(np.std(values))
        out["seeds"] = seeds
    return out


def cmd_eval_accuracy(args, cfg: RunConfig) -> int:
    predictor = _load_predictor(args.checkpoint)
    dataset = read_dataset(args.data)
    _, held_out = dataset.split(cfg.train.holdout_fraction)
    decode_cfg = _decode_cfg(cfg, dataset.shape, args.sampling)

    if args.sweep:
        rows = sweep_ot(predictor, held_out, cfg.seed, cfg.eval.sweep_c_d, cfg.eval.sweep_c_w,
                        decode_cfg)
        logger.info(write_json({"sweep": rows}, cfg.path("sweep_report.json")))
        return 0

    variants = [Variant.BASELINE, Variant.ITC] if args.variant == "both" else [Variant(args.variant)]
    report = {v.value: _averaged(predictor, v, held_out, cfg, decode_cfg) for v in variants}
    logger.info(write_json(report, cfg.path("accuracy_report.json")))
    print(json.dumps(report, indent=2))
    return 0


def cmd_rollout(args, cfg: RunConfig) -> int:
    cb = read_codebook(args.codebook)
    horizon = cfg.eval.rollout_horizon if args.horizon is None else args.horizon
    decode_cfg = _decode_cfg(cfg, cfg.grid.shape, args.sampling)
    if not args.checkpoint and (args.compare or not args.oracle):
        raise ConfigError("rollout needs --checkpoint unless --oracle is given")

    if args.compare:
        predictor = _load_predictor(args.checkpoint)
        seeds = range(cfg.seed, cfg.seed + cfg.eval.rollout_seeds)
        result = compare_rollouts(predictor, cfg.grid, cb, seeds, horizon, decode_cfg)
        logger.info(write_json(result, cfg.path("rollout_compare.json")))
        print(json.dumps(result["totals"]))
        return 0

    frames, actions, n_true = episode_script(cfg.grid, cfg.seed, cb, horizon)
    if args.oracle:
        predictor = OraclePredictor(cb.size, script=frames)
    else:
        predictor = _load_predictor(args.checkpoint)
    res = rollout(predictor, args.variant, frames[0], actions, horizon, cfg.seed,
                  creature_tokens(cb), decode_cfg, true_count=n_true)

    symbols = token_symbols(cb)
    grids = [frame_symbols(f, symbols) for f in res.frames]
    print(char_rollout(grids, labels=[f"t={i}" for i in range(len(grids))]))
    print(f"creatures per frame: {res.counts} (true {res.true_count}); "
          f"duplication {res.duplication}, disappearance {res.disappearance}")
    if args.pgm:
        for i, g in enumerate(grids):
            logger.info(write_pgm(g, cfg.path(f"rollout_{i:03d}.pgm")))
    if args.html:
        logger.info(write_rollout_html(grids, res.counts, cfg.path("rollout.html"), res.true_count))
    logger.info(write_json({
        "variant": res.variant,
        "horizon": res.horizon,
        "counts": res.counts,
        "true_count": res.true_count,
        "duplication": res.duplication,
        "disappearance": res.disappearance,
        "frames": [f.tokens.tolist() for f in res.frames],
    }, cfg.path("rollout_report.json")))
    return 0


def cmd_decode(args, cfg: RunConfig) -> int:
    with open(args.input, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{args.input} is not valid JSON: {err}") from err
    shape = GridShape(int(doc["height"]), int(doc["width"]))
    pred = PredictionGrid(np.asarray(doc["probs"], dtype=np.float64), shape)
    prev = FrameTokens(doc["prev"], shape)
    decode_cfg = _decode_cfg(cfg, shape, args.sampling)
    decode_cfg = dataclasses.replace(
        decode_cfg,
        ot_region=None if args.full else decode_cfg.ot_region,
        rng_seed=cfg.seed,
    )
    if args.variant == Variant.BASELINE.value:
        out = {"tokens": direct_decode(pred, decode_cfg).tokens.tolist()}
    else:
        res = decode_next_frame_detailed(pred, prev, decode_cfg)
        out = {"tokens": res.frame.tokens.tolist(), "sources": res.sources.tolist()}
    print(json.dumps(out))
    return 0


def cmd_sinkhorn_bench(args, cfg: RunConfig) -> int:
    eps = args.epsilon if args.epsilon is not None else cfg.ot.epsilon
    iters = args.iterations if args.iterations is not None else cfg.ot.iterations
    if args.cost:
        with open(args.cost, encoding="utf-8") as f:
            cost = read_cost_text(f.read())
        plan = sinkhorn(cost, eps, iters, log_domain=not args.naive)
        print(format_plan(plan))
        logger.info("summary %s", json.dumps(plan_summary(plan, cost)))
        return 0

    rng = substream(cfg.seed, 0xBE)
    costs = random_costs(rng, args.count, args.n, args.scale)
    start = time.perf_counter()
    plans = sinkhorn(costs, eps, iters, log_domain=not args.naive)
    elapsed = time.perf_counter() - start
    row = np.abs(plans.sum(axis=-1) - 1.0 / args.n).max()
    col = np.abs(plans.sum(axis=-2) - 1.0 / args.n).max()
    result = {
        "instances": args.count, "n": args.n, "scale": args.scale,
        "epsilon": eps, "iterations": iters,
        "seconds": elapsed, "row_deviation": float(row), "col_deviation": float(col),
    }
    print(json.dumps(result))
    return 0


# ── Parser ─────────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--tiny", action="store_true",
                        help="start from the demo-sized preset instead of the defaults")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--deterministic", action="store_true",
                        help="pin torch to deterministic kernels")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")

    # global flags go after the subcommand, so subparser defaults cannot mask them
    parser = argparse.ArgumentParser(prog="itc", description=__doc__.split("\n")[1])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="collect transitions")
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-wm", parents=[common], help="train the world model")
    p.add_argument("--data", help="reuse a dataset file")
    p.add_argument("--codebook", help="codebook the dataset was tokenized with")
    p.add_argument("--updates", type=int)
    p.set_defaults(func=cmd_train_wm)

    variants = [v.value for v in Variant]
    p = sub.add_parser("eval-accuracy", parents=[common], help="per-step accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=variants + ["both"], default="both")
    p.add_argument("--sampling", choices=["greedy", "categorical"])
    p.add_argument("--sweep", action="store_true", help="ITC accuracy over the c_d x c_w grid")
    p.set_defaults(func=cmd_eval_accuracy)

    p = sub.add_parser("rollout", parents=[common], help="imagined rollout")
    p.add_argument("--checkpoint")
    p.add_argument("--codebook", required=True)
    p.add_argument("--variant", choices=variants, default=Variant.ITC.value)
    p.add_argument("--horizon", type=int)
    p.add_argument("--sampling", choices=["greedy", "categorical"])
    p.add_argument("--oracle", action="store_true", help="predict the true environment frames")
    p.add_argument("--compare", action="store_true", help="paired baseline/ITC rollouts")
    p.add_argument("--pgm", action="store_true")
    p.add_argument("--html", action="store_true")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("decode", parents=[common], help="decode one frame")
    p.add_argument("input", help='JSON with "height", "width", "probs" (L x K), "prev" (L)')
    p.add_argument("--variant", choices=variants, default=Variant.ITC.value)
    p.add_argument("--sampling", choices=["greedy", "categorical"])
    p.add_argument("--full", action="store_true", help="OT over the whole frame")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("sinkhorn-bench", parents=[common], help="solver benchmark")
    p.add_argument("--cost", help='text file: "n m" then n rows of m reals')
    p.add_argument("--epsilon", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--naive", action="store_true", help="plain scaling instead of log domain")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--scale", type=float, default=BENCH_COST_SCALE,
                   help="random costs are uniform on [0, scale]")
    p.set_defaults(func=cmd_sinkhorn_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(-1 if args.quiet else args.verbose)
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except ItcError as err:
        logger.error("%s", err)
        return err.exit_code
    except (OSError, KeyError, ValueError) as err:
        logger.error("%s", err)
        return ConfigError.exit_code
    except Exception:
        logger.exception("unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
