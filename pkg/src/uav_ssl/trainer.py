"""Deterministic training loop, optimizers, checkpoints and the synthetic paired dataset.

All randomness derives from ``train.seed`` through named substreams:
``init`` (parameters), ``data/<epoch>`` (batch order), ``mask-ratio/<step>``
and ``mask-index/<step>/<slot>/<modality>``. A stream depends only on its
name, so resuming at step ``k`` replays exactly what an uninterrupted run
would have drawn.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import ExperimentConfig, SynthSpec, TrainConfig
from .errors import DataError, GeometryError, NumericError, UavSslError
from .losses import LossConfig, LossReport, contrastive_loss, reconstruction_loss, total_loss
from .masking import MaskPlan, make_plan
from .metrics import make_trials, write_trials
from .model import ModelConfig, ModelState, encode, init_state, joint_decode, joint_encode, load_checkpoint, save_checkpoint
from .numcore import RngStream, Tensor
from .patchio import load_tensor, patchify_array, read_manifest, save_array, write_manifest

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def generate_synthetic(spec: SynthSpec, out_dir, model_cfg: ModelConfig | None = None) -> dict:
    """Paired image/spectrogram files driven by a shared per-sample latent.

    Each speaker gets a latent ``z``; each sample perturbs it,
    ``z + noise_std * eps``, and two fixed random linear maps (plus a fixed
    template per modality) turn the perturbed latent into an image and a
    spectrogram. ``pixel_noise_std`` adds independent noise per modality.
    Writes ``train.jsonl``, ``eval.jsonl`` (when eval speakers are requested),
    ``trials.txt`` for the eval split, and UAVT files under ``data/``.
    """
    spec.validate()
    model_cfg = model_cfg or ModelConfig()
    out_dir = Path(out_dir)
    data_dir = out_dir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    root = RngStream(spec.seed).child("synth")
    shapes = {"visual": model_cfg.visual_shape, "audio": model_cfg.audio_shape}
    maps, templates = {}, {}
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        gen = root.child("map", name).generator()
        maps[name] = gen.standard_normal((spec.latent_dim, size)) / math.sqrt(spec.latent_dim)
        templates[name] = gen.standard_normal(size)

    def split(tag: str, n_spk: int, per_spk: int) -> list[dict]:
        rows = []
        gen = root.child("split", tag).generator()
        latents = gen.standard_normal((n_spk, spec.latent_dim))
        for s in range(n_spk):
            for j in range(per_spk):
                sid = f"{tag}-s{s:03d}-{j:03d}"
                z = latents[s] + spec.noise_std * gen.standard_normal(spec.latent_dim)
                row = {"id": sid, "speaker": f"{tag}-s{s:03d}"}
                for name, key in (("visual", "image"), ("audio", "spectrogram")):
                    x = templates[name] + z @ maps[name]
                    if spec.pixel_noise_std > 0:
                        x = x + spec.pixel_noise_std * gen.standard_normal(x.shape)
                    rel = f"data/{sid}.{'img' if name == 'visual' else 'spec'}.uavt"
                    try:
                        save_array(out_dir / rel, x.reshape(shapes[name]))
                    except OSError as exc:
                        raise DataError(f"cannot write {rel}: {exc}") from exc
                    row[key] = rel
                rows.append(row)
        return rows

    out = {"train": out_dir / "train.jsonl"}
    write_manifest(out["train"], split("train", spec.n_speakers, spec.samples_per_speaker))
    if spec.n_eval_speakers > 0:
        rows = split("eval", spec.n_eval_speakers, spec.eval_samples_per_speaker)
        out["eval"] = out_dir / "eval.jsonl"
        write_manifest(out["eval"], rows)
        out["trials"] = out_dir / "trials.txt"
        write_trials(out["trials"], make_trials({r["id"]: r["speaker"] for r in rows}))
    return out


@dataclass
class Dataset:
    ids: list[str]
    speakers: list[str]
    tokens_audio: np.ndarray  # [n, N, P*P*3]
    tokens_visual: np.ndarray  # [n, M, P*P*3]

    def __len__(self) -> int:
        return len(self.ids)


def load_dataset(manifest, cfg: ModelConfig) -> Dataset:
    """Read and tokenize every sample; any unreadable sample aborts with its id."""
    rows = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    if not rows:
        raise DataError("manifest is empty")
    audio, visual = [], []
    for row in rows:
        try:
            img = load_tensor(row["image"], "visual")
            spec = load_tensor(row["spectrogram"], "audio")
        except (OSError, UavSslError) as exc:
            raise DataError(f"sample {row['id']}: {exc}") from exc
        if img.data.shape != cfg.visual_shape:
            raise DataError(f"sample {row['id']}: image shape {img.data.shape} != {cfg.visual_shape}")
        if spec.data.shape[:2] != cfg.audio_shape[:2] or spec.channels not in (1, 3):
            raise DataError(f"sample {row['id']}: spectrogram shape {spec.data.shape} != {cfg.audio_shape}")
        visual.append(img.data)
        audio.append(spec.data if spec.channels == 3 else np.repeat(spec.data, 3, axis=2))
    p = cfg.patch_size
    return Dataset([r["id"] for r in rows], [r["speaker"] for r in rows],
                   patchify_array(np.stack(audio), p), patchify_array(np.stack(visual), p))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def epoch_batches(n: int, batch_size: int, rng: RngStream) -> list[np.ndarray]:
    """Shuffle ``0..n-1`` and cut into batches; a trailing singleton joins the previous batch."""
    if n < 2:
        raise DataError("need at least 2 samples to form a contrastive batch")
    perm = rng.generator().permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def batch_for_step(step: int, n: int, batch_size: int, root: RngStream) -> np.ndarray:
    """Sample indices for 0-based ``step``."""
    per_epoch = len(epoch_batches(n, batch_size, root.child("data", 0)))
    epoch, pos = divmod(step, per_epoch)
    return epoch_batches(n, batch_size, root.child("data", epoch))[pos]


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    kind = "sgd"

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0

    def step(self, state: ModelState) -> None:
        self.t += 1
        for p in state.params.values():
            if p.grad is not None:
                p.data -= p.data.dtype.type(self.lr) * p.grad

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t


class Adam:
    kind = "adam"

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, state: ModelState) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in state.params.items():
            g = p.grad
            if g is None:
                continue
            dt = p.data.dtype.type
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= dt(self.b1)
            m += dt(1.0 - self.b1) * g
            v *= dt(self.b2)
            v += dt(1.0 - self.b2) * (g * g)
            p.data -= dt(self.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt.m/{name}"] = self.m[name]
            out[f"opt.v/{name}"] = self.v[name]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            target = self.m if kind == "opt.m" else self.v
            target[name] = arr.copy()


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.betas, cfg.adam_eps)


def clip_gradients(state: ModelState, max_norm: float | None) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in state.params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in state.params.values():
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

def forward_losses(state: ModelState, tokens_a: np.ndarray, tokens_v: np.ndarray,
                   plan: MaskPlan, loss_cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Masked forward through both branches; returns ``(L, L_c, L_r)`` as tensors.

    Contrastive branch: mean-pooled backbone features of the kept tokens.
    Reconstruction branch: joint encoder over both modalities, then decoder.
    With ``lam == 0`` the contrastive value is computed off-graph.
    """
    b = tokens_a.shape[0]
    rows = np.arange(b)[:, None]
    kept_a, kept_v = plan.kept_audio, plan.kept_visual
    feat_a = encode(tokens_a[rows, kept_a], "audio", state, kept_a)
    feat_v = encode(tokens_v[rows, kept_v], "visual", state, kept_v)
    pooled_a, pooled_v = nc.mean_pool(feat_a), nc.mean_pool(feat_v)
    if loss_cfg.lam == 0:
        pooled_a, pooled_v = pooled_a.detach(), pooled_v.detach()
    l_c = contrastive_loss(pooled_a, pooled_v, loss_cfg)
    rec_a, rec_v = joint_decode(joint_encode(feat_a, feat_v, state, kept_a, kept_v), plan, state)
    l_r = reconstruction_loss(tokens_a, rec_a, tokens_v, rec_v, plan, loss_cfg)
    return total_loss(l_r, l_c, loss_cfg.lam), l_c, l_r


def step_plan(cfg: ExperimentConfig, step: int, batch_size: int) -> MaskPlan:
    root = RngStream(cfg.train.seed)
    return make_plan(batch_size, cfg.model.num_audio, cfg.model.num_visual, cfg.mask,
                     root.child("mask-ratio", step), root.child("mask-index", step))


def train_step(tokens_a: np.ndarray, tokens_v: np.ndarray, state: ModelState, optimizer,
               cfg: ExperimentConfig, step: int) -> tuple[LossReport, MaskPlan, float]:
    """Forward, backward, clip, update. ``step`` is 0-based and selects the mask streams."""
    plan = step_plan(cfg, step, tokens_a.shape[0])
    state.zero_grad()
    try:
        loss, l_c, l_r = forward_losses(state, tokens_a, tokens_v, plan, cfg.loss)
        loss.backward()
    except NumericError as exc:
        raise NumericError(f"step {step + 1}: {exc}") from exc
    grad_norm = clip_gradients(state, cfg.train.clip_norm)
    if not math.isfinite(grad_norm):
        raise NumericError(f"step {step + 1}: non-finite gradient norm")
    optimizer.step(state)
    report = LossReport(float(l_c.data), float(l_r.data), float(loss.data), tokens_a.shape[0])
    return report, plan, grad_norm


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def _save_training_checkpoint(path: Path, state: ModelState, optimizer, step: int,
                              cfg: ExperimentConfig) -> None:
    meta = {"step": step, "optimizer": {"kind": optimizer.kind, "t": optimizer.t},
            "experiment": cfg.to_dict()}
    save_checkpoint(path, state, meta, optimizer.state_arrays())


def train(cfg: ExperimentConfig, manifest, out_dir, resume=None, dataset: Dataset | None = None) -> dict:
    """Run ``cfg.train.steps`` steps; writes checkpoints and ``metrics.jsonl`` into ``out_dir``.

    With ``resume`` (a checkpoint written by this function) training continues
    from the stored step and reproduces the uninterrupted run bit for bit.
    """
    cfg.validate()
    tc = cfg.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.dumps() + "\n")
    data = dataset or load_dataset(manifest, cfg.model)
    root = RngStream(tc.seed)
    optimizer = make_optimizer(tc)

    start = 0
    if resume is not None:
        state, meta, extra = load_checkpoint(resume)
        if state.config != cfg.model:
            raise GeometryError("resume checkpoint was trained with a different model config")
        if state.is_inference_only:
            raise DataError("cannot resume from an inference-only checkpoint")
        start = int(meta["step"])
        optimizer.load_arrays(extra, int(meta["optimizer"]["t"]))
    else:
        state = init_state(cfg.model, root.child("init"))

    metrics_path = out_dir / "metrics.jsonl"
    kept = []
    if resume is not None and metrics_path.exists():
        kept = [line for line in metrics_path.read_text().splitlines()
                if line.strip() and json.loads(line)["step"] <= start]
    with open(metrics_path, "w") as fh:
        for line in kept:
            fh.write(line + "\n")

        for step in range(start, tc.steps):
            idx = batch_for_step(step, len(data), tc.batch_size, root)
            report, plan, gnorm = train_step(data.tokens_audio[idx], data.tokens_visual[idx],
                                             state, optimizer, cfg, step)
            n = step + 1
            if n % tc.log_every == 0 or n == tc.steps:
                rec = {"step": n, **report.as_dict(), "ratio_audio": plan.ratio_audio,
                       "ratio_visual": plan.ratio_visual, "grad_norm": gnorm}
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
                log.info("step %d L=%.5f L_c=%.5f L_r=%.5f", n, report.L, report.L_c, report.L_r)
            if n % tc.checkpoint_every == 0 and n != tc.steps:
                _save_training_checkpoint(out_dir / f"ckpt-{n:06d}.uavc", state, optimizer, n, cfg)

    final = out_dir / "final.uavc"
    _save_training_checkpoint(final, state, optimizer, tc.steps, cfg)
    inference = out_dir / "inference.uavc"
    save_checkpoint(inference, state.strip(), {"step": tc.steps, "experiment": cfg.to_dict()})
    return {"final": final, "inference": inference, "metrics": metrics_path, "state": state}


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
