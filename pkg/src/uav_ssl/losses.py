"""Contrastive (InfoNCE over cosine similarities), masked reconstruction, and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import BatchTooSmallError, ConfigError, DegenerateEmbeddingError, DimensionError, NumericError, PreconditionError
from .masking import MaskPlan
from .numcore import Tensor

DIRECTIONS = ("a2v", "symmetric")
RECON_TARGETS = ("masked_only", "all_tokens")


@dataclass
class LossConfig:
    tau: float = 0.05
    lam: float = 0.01
    direction: str = "a2v"
    recon_target: str = "masked_only"

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigError(f"loss.tau must be > 0, got {self.tau}")
        if not self.lam >= 0:
            raise ConfigError(f"loss.lambda must be >= 0, got {self.lam}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"loss.direction must be one of {DIRECTIONS}")
        if self.recon_target not in RECON_TARGETS:
            raise ConfigError(f"loss.recon_target must be one of {RECON_TARGETS}")


@dataclass
class LossReport:
    L_c: float
    L_r: float
    L: float
    batch_size: int

    def as_dict(self) -> dict:
        return {"L": self.L, "L_c": self.L_c, "L_r": self.L_r, "B": self.batch_size}


def contrastive_loss(f_a, f_v, cfg: LossConfig | None = None) -> Tensor:
    """InfoNCE with logits ``cos(F_a[i], F_v[j]) / tau``; matched pairs sit on the diagonal.

    ``a2v`` averages ``-log softmax_j`` at ``j = i``; ``symmetric`` averages
    that with the visual-to-audio direction.
    """
    cfg = cfg or LossConfig()
    f_a, f_v = nc.as_tensor(f_a), nc.as_tensor(f_v)
    if f_a.ndim != 2 or f_a.shape != f_v.shape:
        raise DimensionError(f"expected two [B, D] batches, got {f_a.shape} and {f_v.shape}")
    b = f_a.shape[0]
    if b < 2:
        raise BatchTooSmallError(f"contrastive loss needs B >= 2, got {b}")
    for name, f in (("audio", f_a), ("visual", f_v)):
        norms = np.sqrt((f.data.astype(np.float64) ** 2).sum(axis=1))
        if not np.all(norms > 0):
            raise DegenerateEmbeddingError(f"zero-norm {name} embedding in batch")
    logits = nc.matmul(nc.l2_normalize(f_a), nc.transpose(nc.l2_normalize(f_v))) * (1.0 / cfg.tau)
    eye = np.eye(b, dtype=logits.dtype)
    loss = -nc.tsum(nc.log_softmax(logits, axis=1) * eye) * (1.0 / b)
    if cfg.direction == "symmetric":
        v2a = -nc.tsum(nc.log_softmax(logits, axis=0) * eye) * (1.0 / b)
        loss = (loss + v2a) * 0.5
    nc.check_finite(loss, "contrastive loss")
    return loss


def reconstruction_loss(a, a_rec, v, v_rec, plan: MaskPlan, cfg: LossConfig | None = None) -> Tensor:
    """Per-element mean squared error, audio term plus visual term.

    With ``masked_only`` each term averages over masked tokens only.
    """
    cfg = cfg or LossConfig()
    terms = []
    for name, target, rec, masked in (("audio", a, a_rec, plan.audio_mask()),
                                      ("visual", v, v_rec, plan.visual_mask())):
        rec = nc.as_tensor(rec)
        target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=rec.dtype)
        if target.shape != rec.shape:
            raise DimensionError(f"{name} reconstruction {rec.shape} vs target {target.shape}")
        if rec.ndim == 2:
            masked = masked[0]
        if masked.shape != rec.shape[:-1]:
            raise DimensionError(f"{name} mask {masked.shape} does not match tokens {rec.shape[:-1]}")
        diff = rec - target
        sq = diff * diff
        if cfg.recon_target == "masked_only":
            count = int(masked.sum())
            if count == 0:
                raise PreconditionError(f"no masked {name} tokens to reconstruct")
            weight = masked[..., None].astype(rec.dtype)
            terms.append(nc.tsum(sq * weight) * (1.0 / (count * rec.shape[-1])))
        else:
            terms.append(nc.tmean(sq))
    loss = terms[0] + terms[1]
    nc.check_finite(loss, "reconstruction loss")
    return loss


def total_loss(l_r, l_c, lam: float):
    """``L_r + lam * L_c``; accepts tensors (differentiable) or plain floats."""
    for name, val in (("L_r", l_r), ("L_c", l_c), ("lambda", lam)):
        data = val.data if isinstance(val, Tensor) else val
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite {name}")
    if isinstance(l_r, Tensor) or isinstance(l_c, Tensor):
        return nc.as_tensor(l_r) + nc.as_tensor(l_c) * lam
    return float(l_r) + lam * float(l_c)

