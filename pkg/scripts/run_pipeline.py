"""Synthetic data -> training -> per-mode embeddings -> trial scores -> EER / minDCF.

Writes everything under ``--out`` and prints one JSON summary.
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from uav_ssl import numcore as nc
from uav_ssl.config import ExperimentConfig, load_config
from uav_ssl.metrics import evaluate, join_scores, parse_trials
from uav_ssl.model import encode, load_checkpoint
from uav_ssl.trainer import generate_synthetic, load_dataset, read_metrics, train
from uav_ssl.verify import embed_manifest, load_embedding_index, score


def retrieval_r1(state, manifest, cfg) -> float:
    ds = load_dataset(manifest, cfg.model)
    fa = nc.mean_pool(encode(ds.tokens_audio, "audio", state)).data.astype(np.float64)
    fv = nc.mean_pool(encode(ds.tokens_visual, "visual", state)).data.astype(np.float64)
    fa /= np.linalg.norm(fa, axis=1, keepdims=True)
    fv /= np.linalg.norm(fv, axis=1, keepdims=True)
    return float(np.mean(np.argmax(fa @ fv.T, axis=1) == np.arange(len(fa))))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="experiment JSON (default: built-in defaults)")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("--out", default="runs/pipeline")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = cfg.with_overrides(args.set) if args.set else cfg
    out = Path(args.out)
    paths = generate_synthetic(cfg.synth, out / "data", cfg.model)
    t0 = time.perf_counter()
    result = train(cfg, paths["train"], out / "run")
    elapsed = time.perf_counter() - t0
    recs = read_metrics(result["metrics"])
    state, _, _ = load_checkpoint(result["inference"])
    summary = {
        "train_seconds": elapsed,
        "first": {k: recs[0][k] for k in ("L", "L_c", "L_r")},
        "last": {k: recs[-1][k] for k in ("L", "L_c", "L_r")},
        "train_r_at_1": retrieval_r1(result["state"], paths["train"], cfg),
        "eval": {},
    }
    if "trials" in paths:
        trials = parse_trials(paths["trials"])
        for mode in ("audio", "visual", "audiovisual"):
            emb = load_embedding_index(embed_manifest(paths["eval"], state, mode, out / "emb" / mode))
            scores = {(t.enroll, t.test): score(emb[t.enroll], emb[t.test]) for t in trials}
            summary["eval"][mode] = evaluate(join_scores(trials, scores), cfg.eval.p_target, cfg.eval.c_miss,
                                             cfg.eval.c_fa)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
