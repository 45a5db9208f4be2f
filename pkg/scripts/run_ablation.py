"""Masking-mode ablation: asymmetric vs symmetric (and optionally complementary) ratios.

Every arm uses the same seed, data and config apart from ``mask.mode``; the
script reports final losses and eval-split EER per embedding mode. At desk
scale the arms are expected to be close; nothing here asserts an ordering.
"""

import argparse
import json
import logging
from pathlib import Path

from uav_ssl.config import ExperimentConfig, load_config
from uav_ssl.metrics import evaluate, join_scores, parse_trials
from uav_ssl.model import load_checkpoint
from uav_ssl.trainer import generate_synthetic, read_metrics, train
from uav_ssl.verify import embed_manifest, load_embedding_index, score


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("--modes", default="asymmetric,symmetric")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    base = load_config(args.config) if args.config else ExperimentConfig()
    base = base.with_overrides(args.set) if args.set else base
    out = Path(args.out)
    paths = generate_synthetic(base.synth, out / "data", base.model)
    trials = parse_trials(paths["trials"]) if "trials" in paths else []
    table = {}
    for mode in args.modes.split(","):
        cfg = base.with_overrides([f"mask.mode={mode}"])
        result = train(cfg, paths["train"], out / mode)
        last = read_metrics(result["metrics"])[-1]
        row = {"L": last["L"], "L_c": last["L_c"], "L_r": last["L_r"]}
        state, _, _ = load_checkpoint(result["inference"])
        for emb_mode in ("audio", "visual", "audiovisual") if trials else ():
            emb = load_embedding_index(embed_manifest(paths["eval"], state, emb_mode, out / mode / "emb" / emb_mode))
            s = join_scores(trials, {(t.enroll, t.test): score(emb[t.enroll], emb[t.test]) for t in trials})
            row[f"eer_{emb_mode}"] = evaluate(s)["eer"]
        table[mode] = row
    (out / "ablation.json").write_text(json.dumps(table, indent=2) + "\n")
    print(json.dumps(table, indent=2))


if __name__ == "__main__":
    main()
