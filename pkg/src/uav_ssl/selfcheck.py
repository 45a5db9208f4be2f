"""Built-in invariant checks behind ``uav-ssl selfcheck``.

Three suites, each returning a JSON-ready dict with a ``passed`` flag:
gradient agreement with central differences on a toy model, masking-ratio
statistics, and EER/minDCF against a direct threshold sweep.
"""

from __future__ import annotations

import numpy as np

from .losses import LossConfig
from .masking import MaskConfig, make_plan, sample_ratios
from .metrics import ScoreSet, compute_eer, compute_min_dcf
from .model import ModelConfig, ModelState, init_state
from .numcore import RngStream, finite_difference_grad
from .trainer import forward_losses

TOY = ModelConfig(dim=8, depth=2, heads=2, mlp_ratio=2, patch_size=2, grid_visual=(2, 2), grid_audio=(2, 2),
                  decoder_dim=8, decoder_heads=2)

def toy_problem(seed: int = 0, batch: int = 2, cfg: ModelConfig = TOY):
    """Float64 toy state, a paired batch and a mask plan."""
    root = RngStream(seed)
    state = init_state(cfg, root.child("init"), dtype=np.float64)
    gen = root.child("batch").generator()
    ta = gen.standard_normal((batch, cfg.num_audio, cfg.token_dim))
    tv = gen.standard_normal((batch, cfg.num_visual, cfg.token_dim))
    plan = make_plan(batch, cfg.num_audio, cfg.num_visual, MaskConfig(), root.child("ratio"), root.child("index"))
    return state, ta, tv, plan


def sample_coords(state: ModelState, per_tensor: int, seed: int) -> list[tuple[str, int]]:
    gen = RngStream(seed).child("coords").generator()
    out = []
    for name, p in state.params.items():
        k = min(per_tensor, p.size)
        out.extend((name, int(i)) for i in np.sort(gen.choice(p.size, k, replace=False)))
    return out


def relative_errors(analytic, numeric) -> np.ndarray:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = np.maximum(np.abs(a), np.abs(n))
    return np.abs(a - n) / np.where(scale > 0, scale, 1.0)


def zero_floor(dtype, numeric, loss: float, eps: float) -> float:
    """Absolute resolution below which a gradient entry counts as zero.

    The larger of one ulp of the largest gradient at ``dtype`` and the
    oracle's own roundoff, ``u_oracle * |L| / eps``. Relative error is
    undefined where the exact gradient is zero (attention key biases, by
    softmax shift invariance), so those entries are judged against this.
    """
    ulp = np.finfo(dtype).eps * float(np.max(np.abs(numeric)))
    oracle = float(np.finfo(np.longdouble).eps) * abs(loss) / eps
    return float(max(ulp, oracle))


def gradient_check(dtype=np.float64, tol: float | None = None, eps: float = 1e-6, per_tensor: int = 3,
                   seed: int = 0, loss_cfg: LossConfig | None = None) -> dict:
    """Analytic gradients of the combined loss against central differences.

    The analytic pass runs at ``dtype``. The numeric oracle evaluates the loss
    in extended precision (``np.longdouble``) at the same dtype-rounded
    parameters: in float64 the differencing roundoff, about
    ``u * |L| / eps``, is as large as the smallest gradients being checked.
    """
    dtype = np.dtype(dtype)
    tol = tol if tol is not None else (1e-6 if dtype == np.float64 else 1e-3)
    loss_cfg = loss_cfg or LossConfig(tau=0.5, lam=1.0)
    state64, ta, tv, plan = toy_problem(seed)
    state = state64.astype(dtype)
    ta, tv = ta.astype(dtype), tv.astype(dtype)
    wide = np.longdouble
    oracle = state.astype(wide)
    ta_w, tv_w = ta.astype(wide), tv.astype(wide)

    state.zero_grad()
    loss, _, _ = forward_losses(state, ta, tv, plan, loss_cfg)
    loss.backward()

    coords = sample_coords(state, per_tensor, seed)
    analytic, numeric = [], []
    for name, i in coords:
        fd = finite_difference_grad(lambda _: forward_losses(oracle, ta_w, tv_w, plan, loss_cfg)[0],
                                    oracle[name], eps, coords=[i])
        numeric.append(float(fd.data.reshape(-1)[i]))
        analytic.append(float(state[name].grad.reshape(-1)[i]))
    analytic, numeric = np.array(analytic), np.array(numeric)
    err = relative_errors(analytic, numeric)
    floor = zero_floor(dtype, numeric, float(loss.data), eps)
    ok = np.abs(analytic - numeric) <= tol * np.maximum(np.abs(analytic), np.abs(numeric)) + floor
    frac = float(np.mean(ok))
    above = np.maximum(np.abs(analytic), np.abs(numeric)) > floor
    err_above = np.where(above, err, 0.0)
    worst = int(np.argmax(err_above))
    return {"passed": frac >= 0.99, "dtype": dtype.name, "oracle_dtype": np.dtype(wide).name, "eps": eps,
            "tol": tol, "zero_floor": floor, "n_coords": len(coords), "n_below_floor": int((~above).sum()),
            "fraction_within_tol": frac, "max_rel_err_above_floor": float(err_above[worst]),
            "worst_coord": list(coords[worst])}


def masking_check(n: int = 10_000, seed: int = 0, lo: float = 0.3, hi: float = 0.6) -> dict:
    root = RngStream(seed).child("selfcheck-mask")
    r = np.array([sample_ratios(root.child(i), lo, hi, "asymmetric") for i in range(n)])
    mean_a, mean_v = float(r[:, 0].mean()), float(r[:, 1].mean())
    mid = (lo + hi) / 2
    ok = (r.min() >= lo and r.max() <= hi and abs(mean_a - mid) < 0.01 and abs(mean_v - mid) < 0.01
          and abs(mean_a - mean_v) < 0.01)
    return {"passed": bool(ok), "n": n, "min": float(r.min()), "max": float(r.max()),
            "mean_audio": mean_a, "mean_visual": mean_v}


def sweep_metrics(scores: np.ndarray, labels: np.ndarray, p_target: float = 0.01) -> tuple[float, float]:
    """EER and minDCF from a direct sweep: one threshold per distinct score plus reject-all."""
    tar, non = scores[labels == 1], scores[labels == 0]
    cands = np.append(np.unique(scores), np.inf)
    p_miss = (tar[None, :] < cands[:, None]).mean(1)
    p_fa = (non[None, :] >= cands[:, None]).mean(1)
    dcf = np.min(p_target * p_miss + (1 - p_target) * p_fa) / min(p_target, 1 - p_target)
    d = p_miss - p_fa
    k = int(np.argmax(d >= 0))
    if d[k] == 0 or k == 0:
        return float(p_miss[k]), float(dcf)
    a = -d[k - 1] / (d[k] - d[k - 1])
    return float(p_miss[k - 1] + a * (p_miss[k] - p_miss[k - 1])), float(dcf)


def metric_check(n_sets: int = 100, n_scores: int = 1000, seed: int = 0, tol: float = 1e-9) -> dict:
    root = RngStream(seed).child("selfcheck-metrics")
    worst = 0.0
    for i in range(n_sets):
        gen = root.child(i).generator()
        labels = (gen.random(n_scores) < 0.3).astype(np.int64)
        labels[:2] = (0, 1)
        scores = gen.standard_normal(n_scores) + labels
        if i % 2:
            scores = np.round(scores, 1)
        s = ScoreSet(scores, labels)
        eer_ref, dcf_ref = sweep_metrics(scores, labels)
        worst = max(worst, abs(compute_eer(s)[0] - eer_ref), abs(compute_min_dcf(s)[0] - dcf_ref))
    gen = root.child("random").generator()
    rand_eer = compute_eer(ScoreSet(gen.standard_normal(10_000), gen.integers(0, 2, 10_000)))[0]
    return {"passed": worst < tol and abs(rand_eer - 0.5) < 0.03, "n_sets": n_sets, "max_abs_diff": worst,
            "random_label_eer": rand_eer}


def run_all(quick: bool = False) -> dict:
    per = 1 if quick else 3
    results = {
        "gradient_float64": gradient_check(np.float64, per_tensor=per),
        "gradient_float32": gradient_check(np.float32, per_tensor=per),
        "masking": masking_check(2_000 if quick else 10_000),
        "metrics": metric_check(10 if quick else 100),
    }
    results["passed"] = all(r["passed"] for r in results.values())
    return results
