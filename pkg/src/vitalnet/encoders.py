"""Small trainable encoders for the three modalities.

* visual: conv3x3/s2 (1->8) + relu, conv3x3/s2 (8->C) + relu; output N x C x H/4 x W/4
* tabular: dense 10->32 + relu, dense 32->C
* text: hashed-vocabulary embedding table, mean-pooled over tokens
"""
from __future__ import annotations

import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_CHANNELS = 64
DEFAULT_VOCAB = 4096
HIDDEN_CONV = 8
HIDDEN_TAB = 32
TAB_WIDTH = 10

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"[^\W_]+")


class BatchError(ValueError):
    """Images in one batch do not share a size."""


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageSlice:
    width: int
    height: int
    pixels: bytes  # 8-bit grayscale, row-major

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError(f"image must be at least 8x8, got {self.width}x{self.height}")
        if len(self.pixels) != self.width * self.height:
            raise ValueError(f"expected {self.width * self.height} pixels, got {len(self.pixels)}")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageSlice":
        arr = np.asarray(arr)
        if arr.dtype != np.uint8:
            arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        h, w = arr.shape
        return cls(w, h, arr.tobytes())

    def to_array(self) -> np.ndarray:
        """Pixel values rescaled to [0, 1], shape (height, width)."""
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width) / 255.0


def write_pgm(path, image: ImageSlice) -> None:
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.pixels)


def read_pgm(path) -> ImageSlice:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pixels = raw[pos:pos + width * height]
    return ImageSlice(width, height, pixels)


# ---------------------------------------------------------------------------
# text
# ---------------------------------------------------------------------------

def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def tokenize(report: str, vocab: int = DEFAULT_VOCAB) -> list[int]:
    """Lowercase, split on non-alphanumeric runs, hash each token into [0, vocab)."""
    return [fnv1a_64(tok.encode("utf-8")) % vocab for tok in _TOKEN_RE.findall(report.lower())]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

PIXEL_MEAN = 0.5
RELU_GAIN = np.sqrt(6.0)  # He-uniform bound for weights feeding a ReLU


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    bound = gain * np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class EncoderParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    tab_w1: Tensor
    tab_b1: Tensor
    tab_w2: Tensor
    tab_b2: Tensor
    embed: Tensor

    @property
    def channels(self) -> int:
        return self.conv2_w.shape[0]

    @property
    def vocab(self) -> int:
        return self.embed.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int = DEFAULT_CHANNELS,
             vocab: int = DEFAULT_VOCAB) -> "EncoderParams":
        c = channels
        return cls(
            conv1_w=uniform_init(rng, (HIDDEN_CONV, 1, 3, 3), 9, RELU_GAIN),
            conv1_b=uniform_init(rng, (HIDDEN_CONV,), 9),
            conv2_w=uniform_init(rng, (c, HIDDEN_CONV, 3, 3), HIDDEN_CONV * 9, RELU_GAIN),
            conv2_b=uniform_init(rng, (c,), HIDDEN_CONV * 9),
            tab_w1=uniform_init(rng, (TAB_WIDTH, HIDDEN_TAB), TAB_WIDTH, RELU_GAIN),
            tab_b1=uniform_init(rng, (HIDDEN_TAB,), TAB_WIDTH),
            tab_w2=uniform_init(rng, (HIDDEN_TAB, c), HIDDEN_TAB),
            tab_b2=uniform_init(rng, (c,), HIDDEN_TAB),
            # one active row per token: fan_in 1
            embed=uniform_init(rng, (vocab, c), 1),
        )

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def stack_images(images: Sequence[ImageSlice]) -> np.ndarray:
    if not images:
        raise BatchError("empty image batch")
    sizes = {(im.height, im.width) for im in images}
    if len(sizes) != 1:
        raise BatchError(f"non-uniform image sizes in batch: {sorted(sizes)}")
    return np.stack([im.to_array() for im in images])[:, None, :, :]


def encode_visual(images, params: EncoderParams) -> Tensor:
    """Feature map N x C x H/4 x W/4 from a list of ImageSlice or an (N, 1, H, W) array.

    Pixels in [0, 1] are centred by subtracting PIXEL_MEAN before the first
    convolution.
    """
    if isinstance(images, Tensor):
        x = images
    elif isinstance(images, np.ndarray):
        x = Tensor(images)
    else:
        x = Tensor(stack_images(images))
    if x.ndim != 4 or x.shape[1] != 1:
        raise T.DimensionError(f"visual input must be (N, 1, H, W), got {x.shape}")
    x = T.add(x, Tensor(np.full(x.shape, -PIXEL_MEAN)))
    h = T.relu(T.conv2d(x, params.conv1_w, params.conv1_b, stride=2, pad=1))
    return T.relu(T.conv2d(h, params.conv2_w, params.conv2_b, stride=2, pad=1))


def encode_tabular(vecs, params: EncoderParams) -> Tensor:
    x = vecs if isinstance(vecs, Tensor) else Tensor(np.atleast_2d(np.asarray(vecs, dtype=np.float64)))
    if x.ndim != 2 or x.shape[1] != TAB_WIDTH:
        raise T.DimensionError(f"tabular input must be (N, {TAB_WIDTH}), got {x.shape}")
    h = T.relu(T.add_bias(T.matmul(x, params.tab_w1), params.tab_b1))
    return T.add_bias(T.matmul(h, params.tab_w2), params.tab_b2)


def encode_text(token_lists: Sequence[Sequence[int]], params: EncoderParams) -> Tensor:
    return T.embedding_mean(params.embed, token_lists)
