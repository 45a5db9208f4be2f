"""Inference-time embeddings (audio, visual or their mean) and cosine scoring."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateEmbeddingError, ModalityError
from .model import ModelState, encode
from .numcore import mean_pool
from .patchio import RawInput, load_array, load_tensor, read_manifest, save_array, tokenize

MODES = ("audio", "visual", "audiovisual")


@dataclass
class Embedding:
    values: np.ndarray
    modality: str

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


def _embed_batch(raw: list[RawInput], modality: str, state: ModelState) -> np.ndarray:
    tokens = np.stack([tokenize(x, state.config.patch_size).tokens for x in raw])
    return mean_pool(encode(tokens, modality, state)).data


def embed(image: RawInput | None = None, spectrogram: RawInput | None = None,
          mode: str = "audiovisual", state: ModelState | None = None) -> Embedding:
    """Encode every token (no masking) and mean-pool; audiovisual averages the two."""
    if mode not in MODES:
        raise ModalityError(f"mode must be one of {MODES}, got {mode!r}")
    need_audio = mode in ("audio", "audiovisual")
    need_visual = mode in ("visual", "audiovisual")
    if need_audio and spectrogram is None:
        raise ModalityError(f"mode {mode!r} needs a spectrogram")
    if need_visual and image is None:
        raise ModalityError(f"mode {mode!r} needs an image")
    out = embed_many([image] if need_visual else None, [spectrogram] if need_audio else None, mode, state)
    return Embedding(out[0], mode)


def embed_many(images: list[RawInput] | None, spectrograms: list[RawInput] | None,
               mode: str, state: ModelState, batch_size: int = 64) -> np.ndarray:
    """Batched version of :func:`embed`; returns ``[n, D]``."""
    if mode not in MODES:
        raise ModalityError(f"mode must be one of {MODES}, got {mode!r}")
    parts = {}
    for modality, items in (("audio", spectrograms), ("visual", images)):
        if mode in (modality, "audiovisual"):
            if items is None:
                raise ModalityError(f"mode {mode!r} needs {modality} inputs")
            parts[modality] = np.concatenate([
                _embed_batch(items[i:i + batch_size], modality, state)
                for i in range(0, len(items), batch_size)])
    if mode == "audiovisual":
        return (parts["audio"] + parts["visual"]) / 2
    return parts[mode]


def score(e1, e2) -> float:
    """Cosine similarity, computed in float64."""
    a = np.asarray(e1.values if isinstance(e1, Embedding) else e1, dtype=np.float64)
    b = np.asarray(e2.values if isinstance(e2, Embedding) else e2, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateEmbeddingError("cannot score a zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def embed_manifest(manifest_path, state: ModelState, mode: str, out_dir) -> Path:
    """Write one UAVT vector per sample plus ``embeddings.jsonl`` (id -> path)."""
    rows = read_manifest(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = [load_tensor(r["image"], "visual") for r in rows] if mode != "audio" else None
    specs = [load_tensor(r["spectrogram"], "audio") for r in rows] if mode != "visual" else None
    vectors = embed_many(images, specs, mode, state)
    index = out_dir / "embeddings.jsonl"
    with open(index, "w") as fh:
        for row, vec in zip(rows, vectors):
            name = f"{row['id']}.uavt"
            save_array(out_dir / name, vec)
            fh.write(json.dumps({"id": row["id"], "path": name, "mode": mode}) + "\n")
    return index


def load_embedding_index(path) -> dict[str, np.ndarray]:
    path = Path(path)
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            p = Path(rec["path"])
            out[rec["id"]] = load_array(p if p.is_absolute() else path.parent / p)
    return out
