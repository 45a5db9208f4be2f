"""Shared-backbone ViT plus the joint encoder/decoder used for masked reconstruction.

Parameter groups:

* ``shared``: patch projection and backbone blocks, one copy for both modalities.
* ``embedding``: per-modality positional tables for the backbone input.
* ``joint``: modality-type embeddings, joint encoder, decoder. Training only;
  stripped from inference checkpoints.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError, FormatError, GeometryError, CorruptionError
from .masking import MaskPlan
from .numcore import RngStream, Tensor
from .patchio import TokenSequence

GROUPS = ("shared", "embedding", "joint")
CKPT_MAGIC = b"UAVC"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 16
    grid_visual: tuple[int, int] = (4, 4)
    grid_audio: tuple[int, int] = (4, 4)
    joint_encoder_depth: int = 2
    joint_decoder_depth: int = 6
    decoder_dim: int = 48
    decoder_heads: int = 4

    def __post_init__(self):
        self.grid_visual = tuple(int(v) for v in self.grid_visual)
        self.grid_audio = tuple(int(v) for v in self.grid_audio)

    @property
    def num_visual(self) -> int:
        return self.grid_visual[0] * self.grid_visual[1]

    @property
    def num_audio(self) -> int:
        return self.grid_audio[0] * self.grid_audio[1]

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def visual_shape(self) -> tuple[int, int, int]:
        return (self.grid_visual[0] * self.patch_size, self.grid_visual[1] * self.patch_size, 3)

    @property
    def audio_shape(self) -> tuple[int, int, int]:
        return (self.grid_audio[0] * self.patch_size, self.grid_audio[1] * self.patch_size, 1)

    def num_tokens(self, modality: str) -> int:
        return self.num_audio if modality == "audio" else self.num_visual

    def validate(self) -> None:
        if self.dim < 1 or self.dim % self.heads:
            raise ConfigError(f"model.dim={self.dim} must be divisible by model.heads={self.heads}")
        if self.decoder_dim < 1 or self.decoder_dim % self.decoder_heads:
            raise ConfigError(f"model.decoder_dim={self.decoder_dim} must be divisible by "
                              f"model.decoder_heads={self.decoder_heads}")
        for key in ("depth", "joint_encoder_depth", "joint_decoder_depth"):
            if getattr(self, key) < 0:
                raise ConfigError(f"model.{key} must be >= 0")
        if self.patch_size < 1 or self.mlp_ratio < 1:
            raise ConfigError("model.patch_size and model.mlp_ratio must be >= 1")
        if self.num_visual < 2 or self.num_audio < 2:
            raise ConfigError("each modality needs at least 2 patches (grid_visual, grid_audio)")

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Ordered ``name -> (shape, group)`` for every trainable parameter."""
    d, dd, k = cfg.dim, cfg.decoder_dim, cfg.token_dim
    out: dict[str, tuple[tuple[int, ...], str]] = {
        "patch_embed.w": ((k, d), "shared"),
        "patch_embed.b": ((d,), "shared"),
    }
    for i in range(cfg.depth):
        for name, shape in nc.block_param_shapes(d, d * cfg.mlp_ratio).items():
            out[f"backbone.{i}.{name}"] = (shape, "shared")
    out["pos.audio"] = ((cfg.num_audio, d), "embedding")
    out["pos.visual"] = ((cfg.num_visual, d), "embedding")
    out["joint.type.audio"] = ((d,), "joint")
    out["joint.type.visual"] = ((d,), "joint")
    out["joint.pos.audio"] = ((cfg.num_audio, d), "joint")
    out["joint.pos.visual"] = ((cfg.num_visual, d), "joint")
    for i in range(cfg.joint_encoder_depth):
        for name, shape in nc.block_param_shapes(d, d * cfg.mlp_ratio).items():
            out[f"joint.enc.{i}.{name}"] = (shape, "joint")
    out["joint.norm.g"] = ((d,), "joint")
    out["joint.norm.b"] = ((d,), "joint")
    out["decoder.embed.w"] = ((d, dd), "joint")
    out["decoder.embed.b"] = ((dd,), "joint")
    out["decoder.mask_token"] = ((dd,), "joint")
    out["decoder.pos.audio"] = ((cfg.num_audio, dd), "joint")
    out["decoder.pos.visual"] = ((cfg.num_visual, dd), "joint")
    out["decoder.type.audio"] = ((dd,), "joint")
    out["decoder.type.visual"] = ((dd,), "joint")
    for i in range(cfg.joint_decoder_depth):
        for name, shape in nc.block_param_shapes(dd, dd * cfg.mlp_ratio).items():
            out[f"decoder.blocks.{i}.{name}"] = (shape, "joint")
    out["decoder.norm.g"] = ((dd,), "joint")
    out["decoder.norm.b"] = ((dd,), "joint")
    out["decoder.head.w"] = ((dd, k), "joint")
    out["decoder.head.b"] = ((k,), "joint")
    return out


class ModelState:
    """Named parameters plus the config that shaped them.

    Every lookup goes through ``__getitem__`` so ``trace()`` can record which
    parameter objects a forward pass touched.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], groups: dict[str, str]):
        self.config = config
        self.params = params
        self.groups = groups
        self._traces: list[list[tuple[str, int]]] = []

    def __getitem__(self, name: str) -> Tensor:
        p = self.params[name]
        for t in self._traces:
            t.append((name, id(p)))
        return p

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self, group: str | None = None) -> list[str]:
        return [n for n in self.params if group is None or self.groups[n] == group]

    def block(self, prefix: str) -> dict[str, Tensor]:
        return {k: self[f"{prefix}.{k}"] for k in nc.BLOCK_KEYS}

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    @property
    def is_inference_only(self) -> bool:
        return not any(g == "joint" for g in self.groups.values())

    @contextmanager
    def trace(self) -> Iterator[list[tuple[str, int]]]:
        log: list[tuple[str, int]] = []
        self._traces.append(log)
        try:
            yield log
        finally:
            self._traces.remove(log)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> ModelState:
        params = {n: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, name=n)
                  for n, p in self.params.items()}
        return ModelState(self.config, params, dict(self.groups))

    def copy(self) -> ModelState:
        return self.astype(self.dtype)

    def strip(self) -> ModelState:
        """Drop the joint encoder/decoder; what remains is enough for inference."""
        keep = [n for n in self.params if self.groups[n] != "joint"]
        return ModelState(self.config, {n: self.params[n] for n in keep}, {n: self.groups[n] for n in keep})


def _trunc_normal(gen: np.random.Generator, shape, std: float) -> np.ndarray:
    x = gen.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _xavier(gen: np.random.Generator, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return gen.uniform(-limit, limit, shape)


def init_state(cfg: ModelConfig, rng: RngStream, dtype=None) -> ModelState:
    """Truncated normal (std 0.02) for embeddings and projections, Xavier for block weights."""
    cfg.validate()
    dtype = np.dtype(dtype or nc.default_dtype())
    params, groups = {}, {}
    for name, (shape, group) in param_shapes(cfg).items():
        gen = rng.child(name).generator()
        leaf = name.rsplit(".", 1)[-1]
        if ".attn.w" in name or ".mlp.w" in name:
            value = _xavier(gen, shape)
        elif leaf == "g":
            value = np.ones(shape)
        elif leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
            value = np.zeros(shape)
        else:
            value = _trunc_normal(gen, shape, 0.02)
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
        groups[name] = group
    return ModelState(cfg, params, groups)


def count_parameters(state_or_cfg, sharing: str = "shared") -> int:
    """Trainable scalars. ``dual-hypothetical`` adds a second backbone + patch projection."""
    if isinstance(state_or_cfg, ModelConfig):
        sizes = {n: (int(np.prod(s)), g) for n, (s, g) in param_shapes(state_or_cfg).items()}
    else:
        sizes = {n: (p.size, state_or_cfg.groups[n]) for n, p in state_or_cfg.params.items()}
    total = sum(s for s, _ in sizes.values())
    if sharing == "shared":
        return total
    if sharing in ("dual", "dual-hypothetical"):
        return total + sum(s for s, g in sizes.values() if g == "shared")
    raise ConfigError(f"sharing must be 'shared' or 'dual-hypothetical', got {sharing!r}")


def parameter_report(state_or_cfg) -> dict:
    if isinstance(state_or_cfg, ModelConfig):
        groups = {g: 0 for g in GROUPS}
        for shape, g in param_shapes(state_or_cfg).values():
            groups[g] += int(np.prod(shape))
    else:
        groups = {g: 0 for g in GROUPS}
        for n, p in state_or_cfg.params.items():
            groups[state_or_cfg.groups[n]] += p.size
    shared = count_parameters(state_or_cfg, "shared")
    dual = count_parameters(state_or_cfg, "dual-hypothetical")
    return {
        "shared_count": shared,
        "dual_count": dual,
        "backbone_projection_count": groups["shared"],
        "embedding_count": groups["embedding"],
        "joint_count": groups["joint"],
        "inference_count": groups["shared"] + groups["embedding"],
        "ratio": dual / shared,
        # backbone + projection cost of the dual model over that of the shared one
        "backbone_ratio": (dual - shared + groups["shared"]) / groups["shared"],
    }


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _as_batch(tokens, indices):
    """Normalize TokenSequence / 2-D / 3-D inputs to ``[B, T, K]`` arrays."""
    if isinstance(tokens, TokenSequence):
        indices = tokens.indices if indices is None else indices
        tokens = tokens.tokens
    tokens = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
    if indices is None:
        indices = np.broadcast_to(np.arange(tokens.shape[1]), tokens.shape[:2])
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim == 1:
        indices = indices[None]
    return tokens, indices, single


def encode(tokens, modality: str, state: ModelState, indices=None) -> Tensor:
    """Shared backbone over (unmasked) tokens.

    ``tokens`` is a TokenSequence, ``[T, K]`` or ``[B, T, K]``; ``indices``
    gives each token's position in the full grid (default: all, in order).
    Returns ``[T, D]`` or ``[B, T, D]`` matching the input rank.
    """
    cfg = state.config
    x, idx, single = _as_batch(tokens, indices)
    if x.shape[-1] != cfg.token_dim:
        raise DimensionError(f"token length {x.shape[-1]} != P*P*3 = {cfg.token_dim}")
    if idx.shape != x.shape[:2]:
        raise GeometryError(f"indices {idx.shape} do not match tokens {x.shape[:2]}")
    n = cfg.num_tokens(modality)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise GeometryError(f"{modality} grid index out of range [0, {n})")
    h = nc.linear(Tensor(x.astype(state.dtype, copy=False)), state["patch_embed.w"], state["patch_embed.b"])
    h = h + nc.gather_rows(state[f"pos.{modality}"], idx)
    for i in range(cfg.depth):
        h = nc.transformer_block(h, state.block(f"backbone.{i}"), cfg.heads)
    return nc.reshape(h, h.shape[1:]) if single else h


def joint_encode(feat_a: Tensor, feat_v: Tensor, state: ModelState,
                 idx_a=None, idx_v=None) -> Tensor:
    """Tag each segment with its type and position, concatenate audio then visual, run joint blocks."""
    cfg = state.config
    single = feat_a.ndim == 2
    if single:
        feat_a = nc.reshape(feat_a, (1,) + feat_a.shape)
        feat_v = nc.reshape(feat_v, (1,) + feat_v.shape)
    if feat_a.shape[-1] != cfg.dim or feat_v.shape[-1] != cfg.dim:
        raise DimensionError(f"joint encoder expects width {cfg.dim}")
    if feat_a.shape[0] != feat_v.shape[0]:
        raise DimensionError("audio and visual features have different batch sizes")
    _, idx_a, _ = _as_batch(np.empty(feat_a.shape[:2] + (0,)), idx_a)
    _, idx_v, _ = _as_batch(np.empty(feat_v.shape[:2] + (0,)), idx_v)
    xa = feat_a + state["joint.type.audio"] + nc.gather_rows(state["joint.pos.audio"], idx_a)
    xv = feat_v + state["joint.type.visual"] + nc.gather_rows(state["joint.pos.visual"], idx_v)
    h = nc.concat([xa, xv], axis=1)
    for i in range(cfg.joint_encoder_depth):
        h = nc.transformer_block(h, state.block(f"joint.enc.{i}"), cfg.heads)
    h = nc.layer_norm(h, state["joint.norm.g"], state["joint.norm.b"])
    return nc.reshape(h, h.shape[1:]) if single else h


def joint_decode(joint: Tensor, plan: MaskPlan, state: ModelState) -> tuple[Tensor, Tensor]:
    """Insert mask tokens at masked positions and decode full-length patch reconstructions."""
    cfg = state.config
    single = joint.ndim == 2
    if single:
        joint = nc.reshape(joint, (1,) + joint.shape)
    n, m = cfg.num_audio, cfg.num_visual
    plan.validate(n, m)
    nu, mu = plan.kept_audio.shape[1], plan.kept_visual.shape[1]
    if joint.shape[1] != nu + mu or joint.shape[0] != plan.batch_size:
        raise GeometryError(f"joint features {joint.shape[:2]} inconsistent with plan ({plan.batch_size}, {nu + mu})")
    y = nc.linear(joint, state["decoder.embed.w"], state["decoder.embed.b"])
    mask_token = state["decoder.mask_token"]
    segments = []
    for name, kept, masked, lo, hi, length in (
            ("audio", plan.kept_audio, plan.audio_mask(), 0, nu, n),
            ("visual", plan.kept_visual, plan.visual_mask(), nu, nu + mu, m)):
        full = nc.scatter_tokens(y[:, lo:hi], kept, length)
        full = full + masked[..., None].astype(y.dtype) * mask_token
        full = full + state[f"decoder.pos.{name}"] + state[f"decoder.type.{name}"]
        segments.append(full)
    h = nc.concat(segments, axis=1)
    for i in range(cfg.joint_decoder_depth):
        h = nc.transformer_block(h, state.block(f"decoder.blocks.{i}"), cfg.decoder_heads)
    h = nc.layer_norm(h, state["decoder.norm.g"], state["decoder.norm.b"])
    out = nc.linear(h, state["decoder.head.w"], state["decoder.head.b"])
    rec_a, rec_v = out[:, :n], out[:, n:]
    if single:
        rec_a, rec_v = nc.reshape(rec_a, rec_a.shape[1:]), nc.reshape(rec_v, rec_v.shape[1:])
    return rec_a, rec_v


def pool_embedding(features: Tensor, modality: str):
    from .verify import Embedding  # local import: verify depends on model

    pooled = nc.mean_pool(features)
    return Embedding(pooled.data, modality)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _config_to_json(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["grid_visual"] = list(cfg.grid_visual)
    d["grid_audio"] = list(cfg.grid_audio)
    return d


def config_from_json(d: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown model config key(s): {', '.join('model.' + k for k in unknown)}")
    return ModelConfig(**d)


def save_checkpoint(path, state: ModelState, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """JSON header (config + manifest with byte offsets) then little-endian f32 payloads.

    ``extra`` carries non-parameter arrays such as optimizer moments.
    """
    entries, blobs, offset = [], [], 0
    items = [(n, p.data, state.groups[n]) for n, p in state.params.items()]
    items += [(n, np.asarray(a), "extra") for n, a in (extra or {}).items()]
    for name, arr, group in items:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "group": group})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": CKPT_VERSION,
        "kind": "inference" if state.is_inference_only else "full",
        "discardable_groups": ["joint"],
        "config": _config_to_json(state.config),
        "meta": meta or {},
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, dtype=None) -> tuple[ModelState, dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8:8 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable checkpoint header") from exc
    if header.get("version") != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = 8 + hlen
    cfg = config_from_json(header["config"])
    dtype = np.dtype(dtype or nc.default_dtype())
    params, groups, extra = {}, {}, {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        if start + 4 * count > len(raw):
            raise CorruptionError(f"{path}: payload for {e['name']} is truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(e["shape"])
        if e["group"] == "extra":
            extra[e["name"]] = arr.astype(np.float32)
        else:
            params[e["name"]] = Tensor(arr.astype(dtype), requires_grad=True, name=e["name"])
            groups[e["name"]] = e["group"]
    return ModelState(cfg, params, groups), header["meta"], extra
