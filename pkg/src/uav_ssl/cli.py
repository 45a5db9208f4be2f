"""``uav-ssl`` command line: synth, train, embed, score, eval, selfcheck, params.

Every command prints one JSON document on stdout; logs go to stderr. Exit
status is 0 on success, 1 on a runtime failure (with ``{"error": ...}`` on
stdout) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import UavSslError

log = logging.getLogger("uav_ssl")


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"train.seed={args.seed}", f"synth.seed={args.seed}"]
    return cfg.with_overrides(overrides) if overrides else cfg.validate()


def _write_config(out_dir: Path, cfg: ExperimentConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.dumps() + "\n")


def cmd_synth(args) -> dict:
    from .trainer import generate_synthetic

    cfg = _experiment(args)
    out = Path(args.out)
    paths = generate_synthetic(cfg.synth, out, cfg.model)
    _write_config(out, cfg)
    return {k: str(v) for k, v in paths.items()}


def cmd_train(args) -> dict:
    from .trainer import read_metrics, train

    cfg = _experiment(args)
    result = train(cfg, args.manifest, args.out, resume=args.resume)
    records = read_metrics(result["metrics"])
    return {"final": str(result["final"]), "inference": str(result["inference"]),
            "metrics": str(result["metrics"]), "steps": cfg.train.steps,
            "last": records[-1] if records else None}


def cmd_embed(args) -> dict:
    from .model import load_checkpoint
    from .verify import embed_manifest

    state, meta, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest), "mode": args.mode,
                  "experiment": meta.get("experiment")}
    (out / "config.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    index = embed_manifest(args.manifest, state, args.mode, out)
    return {"index": str(index), "mode": args.mode, "dim": state.config.dim}


def cmd_score(args) -> dict:
    from .metrics import parse_trials
    from .patchio import load_array
    from .verify import load_embedding_index, score

    if args.emb_a and args.emb_b:
        return {"score": score(load_array(args.emb_a), load_array(args.emb_b))}
    if not (args.trials and args.embeddings and args.out):
        raise UsageError("score needs --emb-a/--emb-b, or --trials, --embeddings and --out")
    emb = load_embedding_index(args.embeddings)
    trials = parse_trials(args.trials)
    with open(args.out, "w") as fh:
        for t in trials:
            for key in (t.enroll, t.test):
                if key not in emb:
                    raise UavSslError(f"no embedding for id {key!r}")
            fh.write(f"{t.enroll} {t.test} {score(emb[t.enroll], emb[t.test])!r}\n")
    return {"scores": str(args.out), "n_trials": len(trials)}


def cmd_eval(args) -> dict:
    from .metrics import evaluate, join_scores, parse_scores, parse_trials, write_det_csv

    s = join_scores(parse_trials(args.trials), parse_scores(args.scores))
    result = evaluate(s, args.p_target, args.c_miss, args.c_fa)
    if args.det_csv:
        write_det_csv(args.det_csv, s)
    return result


def cmd_selfcheck(args) -> dict:
    from .selfcheck import run_all

    return run_all(quick=args.quick)


def cmd_params(args) -> dict:
    from .model import parameter_report

    return parameter_report(_experiment(args).model)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uav-ssl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(sp, seed=True):
        sp.add_argument("--config", help="JSON config with model/mask/loss/train/eval/synth sections")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides train.seed and synth.seed")

    sp = sub.add_parser("synth", help="write a synthetic paired dataset")
    config_flags(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train the shared encoder")
    config_flags(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="checkpoint written by an earlier train run")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("embed", help="embed every sample of a manifest")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--mode", required=True, choices=["audio", "visual", "audiovisual"])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("score", help="cosine score of two embeddings, or of every trial")
    sp.add_argument("--emb-a")
    sp.add_argument("--emb-b")
    sp.add_argument("--trials")
    sp.add_argument("--embeddings", help="embeddings.jsonl written by embed")
    sp.add_argument("--out", help="scores file ('id1 id2 score' lines)")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("eval", help="EER and minDCF of a scored trial list")
    sp.add_argument("--trials", required=True)
    sp.add_argument("--scores", required=True)
    sp.add_argument("--p-target", type=float, default=0.01)
    sp.add_argument("--c-miss", type=float, default=1.0)
    sp.add_argument("--c-fa", type=float, default=1.0)
    sp.add_argument("--det-csv", help="also write DET points as CSV")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("selfcheck", help="gradient, masking and metric invariant checks")
    sp.add_argument("--quick", action="store_true", help="smaller samples")
    sp.set_defaults(func=cmd_selfcheck)

    sp = sub.add_parser("params", help="shared vs dual-encoder parameter counts")
    config_flags(sp, seed=False)
    sp.set_defaults(func=cmd_params)
    return p


def _thread_limit():
    raw = os.environ.get("UAV_SSL_THREADS")
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(raw))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        with _thread_limit():
            result = args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (UavSslError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}))
        log.error("%s failed: %s", args.command, exc)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return 1 if args.command == "selfcheck" and not result["passed"] else 0


if __name__ == "__main__":
    sys.exit(main())
