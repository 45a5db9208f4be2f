"""Tensor files, dataset manifests and patch tokenization.

UAVT layout (little endian)::

    b"UAVT" | version u8 = 1 | dtype u8 (0 = f32) | ndim u8 | reserved u8
    | ndim x u32 dims | f32 payload, row-major

Images and spectrograms are stored as ``[H, W, C]``; embeddings as ``[D]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from .errors import CorruptionError, FormatError, GeometryError, PreconditionError

MAGIC = b"UAVT"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sBBBB")

Modality = Literal["audio", "visual"]
MODALITIES = ("audio", "visual")


@dataclass
class RawInput:
    """One image (visual) or spectrogram (audio) as an ``[H, W, C]`` float array."""

    modality: str
    data: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise PreconditionError(f"unknown modality {self.modality!r}")
        if self.data.ndim != 3:
            raise GeometryError(f"raw input must be [H, W, C], got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class TokenSequence:
    """Flattened ``P x P x 3`` patches in row-major grid order.

    ``indices`` holds each token's position in the full grid; after masking it
    is the (sorted) subset of kept positions, used for positional lookups.
    """

    modality: str
    tokens: np.ndarray
    grid: tuple[int, int]
    patch_size: int
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.indices is None:
            self.indices = np.arange(self.tokens.shape[0])
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.indices.shape[0]:
            raise GeometryError("tokens and indices disagree on token count")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def grid_size(self) -> int:
        return self.grid[0] * self.grid[1]


# ---------------------------------------------------------------------------
# UAVT files
# ---------------------------------------------------------------------------

def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim > 255:
        raise FormatError("too many dimensions")
    head = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, array.ndim, 0)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    return head + dims + payload


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise CorruptionError("file shorter than the UAVT header")
    magic, version, dtype, ndim, _ = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported UAVT version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    off = _HEADER.size
    if len(blob) < off + 4 * ndim:
        raise CorruptionError("truncated dimension table")
    dims = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(blob) - off != 4 * count:
        raise CorruptionError(f"payload holds {len(blob) - off} bytes, header implies {4 * count}")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def save_array(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_array(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_tensor(path, x: RawInput) -> None:
    save_array(path, x.data)


def load_tensor(path, modality: str = "visual") -> RawInput:
    """Read an ``[H, W, C]`` UAVT file. Modality comes from the caller."""
    data = load_array(path)
    if data.ndim != 3:
        raise GeometryError(f"{path}: expected 3 dims [H, W, C], found {data.ndim}")
    return RawInput(modality, data)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

MANIFEST_KEYS = ("id", "speaker", "image", "spectrogram")


def read_manifest(path) -> list[dict]:
    """JSON-lines dataset manifest; relative file paths resolve against its directory."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        missing = [k for k in MANIFEST_KEYS if k not in row]
        if missing:
            raise FormatError(f"{path}:{lineno}: missing keys {missing}")
        for key in ("image", "spectrogram"):
            p = Path(row[key])
            row[key] = str(p if p.is_absolute() else path.parent / p)
        rows.append(row)
    return rows


def write_manifest(path, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps({k: row[k] for k in MANIFEST_KEYS}) + "\n")


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------

def inflate_channels(x: RawInput) -> RawInput:
    """Repeat a one-channel spectrogram across three channels."""
    if x.channels != 1:
        raise PreconditionError(f"channel inflation needs 1 channel, got {x.channels}")
    return RawInput(x.modality, np.repeat(x.data, 3, axis=2))


def prepare(x: RawInput) -> RawInput:
    """Validate channel count for the modality and inflate audio to 3 channels."""
    if x.modality == "visual":
        if x.channels != 3:
            raise PreconditionError(f"visual input needs 3 channels, got {x.channels}")
        return x
    if x.channels == 3:
        return x
    return inflate_channels(x)


def patchify_array(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``[..., H, W, C] -> [..., (H/P)*(W/P), P*P*C]``; patches in row-major grid order."""
    *lead, h, w, c = images.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise GeometryError(f"{h}x{w} input is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(*lead, gh, p, gw, p, c)
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 1)  # -> [..., gh, gw, p, p, c]
    return x.reshape(*lead, gh * gw, p * p * c)


def unpatchify_array(tokens: np.ndarray, grid: tuple[int, int], patch_size: int,
                     channels: int = 3) -> np.ndarray:
    *lead, t, k = tokens.shape
    gh, gw = grid
    p = patch_size
    if t != gh * gw or k != p * p * channels:
        raise GeometryError(f"{t} tokens of length {k} do not fit grid {grid} with patch {p}")
    n = len(lead)
    x = tokens.reshape(*lead, gh, gw, p, p, channels)
    x = np.moveaxis(x, n + 1, n + 2)  # -> [..., gh, p, gw, p, c]
    return x.reshape(*lead, gh * p, gw * p, channels)


def patchify(x: RawInput, patch_size: int) -> TokenSequence:
    if x.channels != 3:
        raise PreconditionError(f"patchify needs 3 channels, got {x.channels}")
    if patch_size < 1 or x.height % patch_size or x.width % patch_size:
        raise GeometryError(f"{x.height}x{x.width} input is not divisible by patch size {patch_size}")
    grid = (x.height // patch_size, x.width // patch_size)
    return TokenSequence(x.modality, patchify_array(x.data, patch_size), grid, patch_size)


def unpatchify(t: TokenSequence) -> RawInput:
    if t.num_tokens != t.grid_size or not np.array_equal(t.indices, np.arange(t.grid_size)):
        raise GeometryError("unpatchify needs the complete token grid in order")
    return RawInput(t.modality, unpatchify_array(t.tokens, t.grid, t.patch_size))


def tokenize(x: RawInput, patch_size: int) -> TokenSequence:
    """Channel handling plus patchify, the usual entry point for model inputs."""
    return patchify(prepare(x), patch_size)
