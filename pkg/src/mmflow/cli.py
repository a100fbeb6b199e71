"""``mmflow`` command line: gen-data, curate, train, distill, sample, eval-text, arena.

Exit codes: 0 success, 1 runtime failure, 2 config error. A YAML config file
(``--config``) supplies defaults; explicit flags and ``--set key=value`` win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, describe, overrides_from_flags, parse_assignment
from .errors import ConfigError

log = logging.getLogger("mmflow")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML run config (see `mmflow --help` for keys)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="mmflow",
        description=__doc__.splitlines()[0],
        epilog="config keys (section.key = default):\n" + describe(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the toy shape/glyph corpus")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory (manifest.jsonl, images/)")
    p.add_argument("--n", type=int, dest="data.n")
    p.add_argument("--seed", type=int, dest="data.seed")
    p.add_argument("--defect-rate", type=float, dest="data.defect_rate")
    p.add_argument("--emb-dim", type=int, dest="data.emb_dim")

    p = sub.add_parser("curate", help="cluster/rarity sampling weights -> weights CSV")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="weights CSV (id, weight)")
    p.add_argument("--gamma-visual", type=float, dest="data.gamma_visual")
    p.add_argument("--gamma-text", type=float, dest="data.gamma_text")
    p.add_argument("--threshold", type=float, dest="data.defect_threshold")
    p.add_argument("--seed", type=int, dest="data.seed")
    p.add_argument("--query", action="append", default=[], help="retrieval-calibration query text")
    p.add_argument("--boost", type=float, default=0.0, help="calibration boost per unit similarity")
    p.add_argument("--top-k", type=int, default=10, help="records retrieved per query")

    p = sub.add_parser("train", help="flow-matching training loop -> checkpoint + train_log.csv")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True, dest="train.seed")
    p.add_argument("--steps", type=int, dest="train.steps")
    p.add_argument("--batch", type=int, dest="train.batch")
    p.add_argument("--lr", type=float, dest="train.lr")
    p.add_argument("--lambda-repa", type=float, dest="train.lambda_repa")
    p.add_argument("--weights", help="weights CSV; 'uniform' disables curation; default: curate on the fly")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("distill", help="few-step student from a teacher checkpoint")
    _common(p)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True, dest="distill.seed")
    p.add_argument("--nfe-student", type=int, dest="distill.nfe_student")
    p.add_argument("--teacher-nfe", type=int, dest="distill.teacher_nfe")
    p.add_argument("--steps", type=int, dest="distill.steps")
    p.add_argument("--weights", help="weights CSV or 'uniform'")

    p = sub.add_parser("sample", help="Euler sampling -> samples/*.f32, samples.json, nfe_quality.csv")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--nfe", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=4, help="number of samples")
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--caption", action="append", help="prompt(s); cycled to fill --n")
    p.add_argument("--manifest", type=Path, help="reference corpus for the energy-distance column")

    p = sub.add_parser("eval-text", help="R_a / R_h per record + availability summary")
    _common(p)
    p.add_argument("--input", type=Path, required=True, help="JSONL of {id, target, rendered, available}")
    p.add_argument("--out", type=Path, required=True, help="metrics CSV (id, R_a, R_h)")
    p.add_argument("--normalize", action="store_const", const=True, dest="eval.normalize")

    p = sub.add_parser("arena", help="replay pairwise battles into an Elo leaderboard")
    _common(p)
    p.add_argument("--battles", type=Path, required=True, help="JSONL of {model_a, model_b, winner, timestamp}")
    p.add_argument("--out", type=Path, required=True, help="leaderboard CSV")
    p.add_argument("--k", type=float, dest="eval.elo_k")
    p.add_argument("--initial", type=float, dest="eval.elo_initial")
    return parser


def _config(args) -> RunConfig:
    """Config file, then --set assignments, then dedicated flags (last wins)."""
    cfg = RunConfig.load(args.config)
    cfg.apply(overrides_from_flags(parse_assignment(s) for s in args.set))
    cfg.apply(overrides_from_flags((k, v) for k, v in vars(args).items() if "." in k))
    return cfg


def _summary(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_data(cfg, args):
    from .toydata import make_corpus

    d = cfg["data"]
    if not 0.0 <= d["defect_rate"] <= 1.0:
        raise ConfigError(f"data.defect_rate must lie in [0, 1], got {d['defect_rate']}")
    if d["n"] < 1:
        raise ConfigError(f"data.n must be >= 1, got {d['n']}")
    records = make_corpus(d["n"], d["seed"], d["defect_rate"], args.out, d["emb_dim"])
    cfg.dump(args.out / "config.yaml")
    _summary({"manifest": str(args.out / "manifest.jsonl"), "records": len(records),
              "config_hash": cfg.hash()})


def cmd_curate(cfg, args):
    from .pipeline import curate_run

    w = curate_run(cfg, args.manifest, args.out, args.query, args.boost, args.top_k)
    kept = int((w.weights > 0).sum())
    _summary({"weights": str(args.out), "retained": kept, "total": len(w.weights), "config_hash": cfg.hash()})


def cmd_train(cfg, args):
    from .pipeline import train_run

    ckpt = train_run(cfg, args.manifest, args.out, args.weights, args.resume)
    cfg.dump(args.out / "config.yaml")
    _summary({"checkpoint": str(ckpt), "log": str(args.out / "train_log.csv"), "config_hash": cfg.hash()})


def cmd_distill(cfg, args):
    from .pipeline import distill_run

    ckpt = distill_run(cfg, args.teacher, args.manifest, args.out, args.weights)
    cfg.dump(args.out / "config.yaml")
    _summary({"checkpoint": str(ckpt), "config_hash": cfg.hash()})


def cmd_sample(cfg, args):
    from .pipeline import sample_run

    if args.nfe < 1 or args.n < 1:
        raise ConfigError("--nfe and --n must be >= 1")
    meta = sample_run(args.checkpoint, args.out, args.nfe, args.seed, args.caption,
                      (args.height, args.width), args.n, args.manifest, cfg["timestep"]["base_resolution"])
    _summary({"samples": str(args.out / "samples.json"), "nfe": meta["nfe"], "seed": meta["seed"]})


def cmd_eval_text(cfg, args):
    from .evaluation import availability, read_text_eval, write_metrics

    records = read_text_eval(args.input)
    rows = write_metrics(args.out, records, cfg["eval"]["normalize"])
    n = len(rows)
    _summary({
        "records": n,
        "mean_R_a": sum(r[1] for r in rows) / n,
        "mean_R_h": sum(r[2] for r in rows) / n,
        "availability": availability(records),
    })


def cmd_arena(cfg, args):
    from .evaluation import arena_replay, read_battles, write_leaderboard

    battles = read_battles(args.battles)
    table = arena_replay(battles, cfg["eval"]["elo_k"], cfg["eval"]["elo_initial"])
    write_leaderboard(args.out, table)
    top = table.leaderboard()[0] if table.ratings else None
    _summary({"battles": len(battles), "models": len(table.ratings), "leader": top and top[0]})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "curate": cmd_curate,
    "train": cmd_train,
    "distill": cmd_distill,
    "sample": cmd_sample,
    "eval-text": cmd_eval_text,
    "arena": cmd_arena,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"mmflow: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - stable exit-code contract
        log.debug("failure", exc_info=True)
        print(f"mmflow: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
