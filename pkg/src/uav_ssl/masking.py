"""Asymmetric masking: per-iteration ratios and per-sample index partitions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError, TooFewTokensError
from .numcore import RngStream
from .patchio import TokenSequence

MASK_MODES = ("asymmetric", "symmetric", "complementary")


@dataclass
class MaskConfig:
    lo: float = 0.3
    hi: float = 0.6
    mode: str = "asymmetric"

    def validate(self) -> None:
        if not 0.0 < self.lo <= self.hi < 1.0:
            raise ConfigError(f"mask bounds must satisfy 0 < lo <= hi < 1, got lo={self.lo} hi={self.hi}")
        if self.mode not in MASK_MODES:
            raise ConfigError(f"mask.mode must be one of {MASK_MODES}, got {self.mode!r}")


@dataclass
class MaskPlan:
    """Masking ratios for one iteration plus masked/kept indices per sample.

    Index arrays are ``[B, k]`` with each row sorted ascending.
    """

    ratio_audio: float
    ratio_visual: float
    masked_audio: np.ndarray
    kept_audio: np.ndarray
    masked_visual: np.ndarray
    kept_visual: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.masked_audio.shape[0]

    def audio_mask(self) -> np.ndarray:
        """Boolean ``[B, N]``, True where the audio token is masked."""
        return _bool_mask(self.masked_audio, self.num_audio)

    def visual_mask(self) -> np.ndarray:
        return _bool_mask(self.masked_visual, self.num_visual)

    @property
    def num_audio(self) -> int:
        return self.masked_audio.shape[1] + self.kept_audio.shape[1]

    @property
    def num_visual(self) -> int:
        return self.masked_visual.shape[1] + self.kept_visual.shape[1]

    def validate(self, num_audio: int, num_visual: int) -> None:
        for name, masked, kept, n in (("audio", self.masked_audio, self.kept_audio, num_audio),
                                      ("visual", self.masked_visual, self.kept_visual, num_visual)):
            if masked.shape[1] + kept.shape[1] != n:
                raise GeometryError(f"{name} plan covers {masked.shape[1] + kept.shape[1]} tokens, grid has {n}")
            both = np.sort(np.concatenate([masked, kept], axis=1), axis=1)
            if not np.array_equal(both, np.broadcast_to(np.arange(n), both.shape)):
                raise GeometryError(f"{name} plan is not a partition of 0..{n - 1}")


def _bool_mask(masked: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((masked.shape[0], n), dtype=bool)
    out[np.arange(masked.shape[0])[:, None], masked] = True
    return out


def sample_ratios(rng: RngStream, lo: float = 0.3, hi: float = 0.6,
                  mode: str = "asymmetric") -> tuple[float, float]:
    """Draw ``(ratio_audio, ratio_visual)`` for one iteration.

    asymmetric: two independent U(lo, hi) draws. symmetric: one draw used for
    both. complementary: ``ratio_visual = lo + hi - ratio_audio``.
    """
    MaskConfig(lo, hi, mode).validate()
    if lo == hi:
        return float(lo), float(lo)
    u = rng.generator().random(2)
    ra = lo + (hi - lo) * float(u[0])
    if mode == "asymmetric":
        rv = lo + (hi - lo) * float(u[1])
    elif mode == "symmetric":
        rv = ra
    else:
        rv = lo + hi - ra
    return ra, rv


def num_masked(ratio: float, num_tokens: int) -> int:
    """Round half up, then clamp to ``[1, T - 1]``."""
    if num_tokens < 2:
        raise TooFewTokensError(f"masking needs at least 2 tokens, got {num_tokens}")
    k = math.floor(ratio * num_tokens + 0.5)
    return min(max(k, 1), num_tokens - 1)


def mask_indices(num_tokens: int, ratio: float, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random subset of positions to mask; returns sorted (masked, kept)."""
    k = num_masked(ratio, num_tokens)
    perm = rng.generator().permutation(num_tokens)
    return np.sort(perm[:k]), np.sort(perm[k:])


def apply_mask(t: TokenSequence, ratio: float, rng: RngStream) -> tuple[TokenSequence, dict]:
    """Drop a random subset of tokens; kept tokens retain order and grid indices."""
    if t.num_tokens < 2:
        raise TooFewTokensError(f"masking needs at least 2 tokens, got {t.num_tokens}")
    masked, kept = mask_indices(t.num_tokens, ratio, rng)
    unmasked = TokenSequence(t.modality, t.tokens[kept], t.grid, t.patch_size, t.indices[kept])
    return unmasked, {"masked": t.indices[masked], "kept": t.indices[kept]}


def make_plan(batch_size: int, num_audio: int, num_visual: int, cfg: MaskConfig,
              ratio_rng: RngStream, index_rng: RngStream) -> MaskPlan:
    """Ratios from ``ratio_rng``; sample ``b`` draws its subsets from ``index_rng.child(b, modality)``."""
    ra, rv = sample_ratios(ratio_rng, cfg.lo, cfg.hi, cfg.mode)
    parts = {}
    for name, n, r in (("audio", num_audio, ra), ("visual", num_visual, rv)):
        rows = [mask_indices(n, r, index_rng.child(b, name)) for b in range(batch_size)]
        parts[name] = (np.stack([m for m, _ in rows]), np.stack([k for _, k in rows]))
    return MaskPlan(ra, rv, parts["audio"][0], parts["audio"][1], parts["visual"][0], parts["visual"][1])
