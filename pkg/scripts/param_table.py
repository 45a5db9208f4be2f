"""Shared vs dual-encoder parameter counts for ViT-B and ViT-L shaped backbones."""

import argparse
import json

from uav_ssl.model import ModelConfig, parameter_report

SHAPES = {
    "ViT-B": dict(dim=768, depth=12, heads=12),
    "ViT-L": dict(dim=1024, depth=24, heads=16),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", type=int, default=14, help="patches per side for both modalities")
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    rows = {}
    for name, shape in SHAPES.items():
        cfg = ModelConfig(**shape, patch_size=16, grid_visual=(args.grid, args.grid),
                          grid_audio=(args.grid, args.grid), decoder_dim=512, decoder_heads=16)
        rows[name] = parameter_report(cfg)
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'backbone':8} {'shared':>14} {'dual':>14} {'backbone+proj':>14} {'inference':>14}")
    for name, r in rows.items():
        print(f"{name:8} {r['shared_count']:>14,} {r['dual_count']:>14,} {r['backbone_projection_count']:>14,} "
              f"{r['inference_count']:>14,}")


if __name__ == "__main__":
    main()
