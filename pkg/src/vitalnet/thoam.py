"""Triplet hierarchical offset attention (THOAM) fusion head and the full model.

Each C-wide modality feature is split into T tokens of width d_tok
(T * d_tok == C) and cross-attention runs *within* each sample, so no
information moves between patients in a batch:

    Q = tok(query) Wq,  K = tok(kv) Wk,  V = tok(kv) Wv        (T x d_tok each)
    Score = softmax(Q K^T / sqrt(d_tok))                       (T x T, row-wise)
    stage(query, kv) = flatten(Score V) Wo                     (width C)

    F1     = stage1(GAP(F_V), F_T)
    fused2 = stage2(F1, F_L)
    output = [fused2 | GAP(F_V)]                               (width 2C)
    logits = output W + b
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import NUM_CLASSES
from . import encoders as E
from . import tensor as T
from .tensor import Tensor

MODALITIES = ("V", "T", "L")
SUBSETS = (("V",), ("T",), ("L",), ("V", "T"), ("V", "L"), ("T", "L"), ("V", "T", "L"))
FUSION_KINDS = ("thoam", "concat")

CHECKPOINT_MAGIC = b"VITALNET-CKPT-1\n"


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the requested model."""


def canonical_subset(present) -> tuple[str, ...]:
    present = set(present)
    unknown = present - set(MODALITIES)
    if unknown:
        raise ValueError(f"unknown modalities {sorted(unknown)}; expected a subset of {MODALITIES}")
    if not present:
        raise ValueError("modality subset must be non-empty")
    return tuple(m for m in MODALITIES if m in present)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class StageParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @classmethod
    def init(cls, rng, channels: int, tokens: int, d_tok: int) -> "StageParams":
        d_m = d_tok
        return cls(
            wq=E.uniform_init(rng, (d_tok, d_m), d_tok),
            wk=E.uniform_init(rng, (d_tok, d_m), d_tok),
            wv=E.uniform_init(rng, (d_tok, d_m), d_tok),
            wo=E.uniform_init(rng, (tokens * d_m, channels), tokens * d_m),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("wq", "wk", "wv", "wo")}


@dataclass
class Decoder:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, in_width: int, classes: int = NUM_CLASSES) -> "Decoder":
        return cls(E.uniform_init(rng, (in_width, classes), in_width),
                   E.uniform_init(rng, (classes,), in_width))

    def __call__(self, h: Tensor) -> Tensor:
        return T.add_bias(T.matmul(h, self.w), self.b)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


@dataclass
class ThoamParams:
    """Fusion-head parameters.

    The full tri-modal head has both stages; bimodal heads use ``stage1``
    only, unimodal and concatenation heads use neither.
    """

    decoder: Decoder
    tokens: int
    d_tok: int
    stage1: StageParams | None = None
    stage2: StageParams | None = None

    def __post_init__(self):
        if self.tokens < 2:
            raise ValueError(f"need at least 2 tokens, got {self.tokens}")

    @property
    def channels(self) -> int:
        return self.tokens * self.d_tok

    @classmethod
    def init(cls, rng, channels: int, tokens: int, present=MODALITIES, fusion: str = "thoam") -> "ThoamParams":
        if channels % tokens:
            raise T.DimensionError(f"C={channels} is not divisible by T={tokens}")
        d_tok = channels // tokens
        present = canonical_subset(present)
        if fusion == "concat":
            return cls(Decoder.init(rng, channels * len(present)), tokens, d_tok)
        if fusion != "thoam":
            raise ValueError(f"unknown fusion kind {fusion!r}")
        k = len(present)
        stage1 = StageParams.init(rng, channels, tokens, d_tok) if k >= 2 else None
        stage2 = StageParams.init(rng, channels, tokens, d_tok) if k == 3 else None
        width = channels if k == 1 else 2 * channels
        return cls(Decoder.init(rng, width), tokens, d_tok, stage1, stage2)

    def named(self) -> dict[str, Tensor]:
        out = {}
        if self.stage1 is not None:
            out.update(self.stage1.named("stage1"))
        if self.stage2 is not None:
            out.update(self.stage2.named("stage2"))
        out.update(self.decoder.named("decoder"))
        return out


@dataclass
class FusionOutput:
    f1: Tensor
    fused2: Tensor
    output: Tensor
    logits: Tensor
    scores: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def to_tokens(f: Tensor, tokens: int) -> Tensor:
    """Row-major split of (N, C) features into (N, T, C // T)."""
    if f.ndim != 2:
        raise T.DimensionError(f"expected (N, C) features, got {f.shape}")
    n, c = f.shape
    if c % tokens:
        raise T.DimensionError(f"C={c} is not divisible by T={tokens}")
    return T.reshape(f, (n, tokens, c // tokens))


def flatten_tokens(t: Tensor) -> Tensor:
    n, k, d = t.shape
    return T.reshape(t, (n, k * d))


def _project(tok: Tensor, w: Tensor) -> Tensor:
    n, k, d = tok.shape
    return T.reshape(T.matmul(T.reshape(tok, (n * k, d)), w), (n, k, w.shape[1]))


def cross_attention_stage(query_src: Tensor, kv_src: Tensor, stage: StageParams, tokens: int,
                          return_parts: bool = False):
    """One cross-attention stage; ``query_src`` attends over ``kv_src`` tokens."""
    if query_src.ndim != 2 or query_src.shape != kv_src.shape:
        raise T.DimensionError(f"stage inputs must share shape (N, C): {query_src.shape} vs {kv_src.shape}")
    q = _project(to_tokens(query_src, tokens), stage.wq)
    k = _project(to_tokens(kv_src, tokens), stage.wk)
    v = _project(to_tokens(kv_src, tokens), stage.wv)
    d_m = stage.wk.shape[1]
    score = T.softmax_rows(T.scale(T.bmm(q, T.transpose(k)), 1.0 / math.sqrt(d_m)))
    attended = T.bmm(score, v)
    out = T.matmul(flatten_tokens(attended), stage.wo)
    if return_parts:
        return out, {"score": score, "values": v, "attended": attended}
    return out


def fuse(fv_gap: Tensor, f_t: Tensor, f_l: Tensor, params: ThoamParams) -> FusionOutput:
    if params.stage1 is None or params.stage2 is None:
        raise ValueError("fuse needs a tri-modal head with two attention stages")
    f1, p1 = cross_attention_stage(fv_gap, f_t, params.stage1, params.tokens, return_parts=True)
    fused2, p2 = cross_attention_stage(f1, f_l, params.stage2, params.tokens, return_parts=True)
    output = T.concat_cols(fused2, fv_gap)
    logits = params.decoder(output)
    return FusionOutput(f1, fused2, output, logits, [p1["score"], p2["score"]])


def concat_fusion(fv_gap: Tensor, f_t: Tensor, f_l: Tensor, decoder: Decoder) -> Tensor:
    """Baseline: logits from [GAP(F_V) | F_T | F_L] through one affine map."""
    return decoder(T.concat_cols(T.concat_cols(fv_gap, f_t), f_l))


def fuse_subset(present, features: dict, params: ThoamParams) -> Tensor:
    """Logits using only the modalities in ``present``.

    One modality: decoder on that feature. Two: the first (in V, T, L order)
    queries the second, then the result is concatenated with the query
    features. Three: :func:`fuse`.
    """
    present = canonical_subset(present)
    if len(present) == 3:
        return fuse(features["V"], features["T"], features["L"], params).logits
    if len(present) == 1:
        return params.decoder(features[present[0]])
    if params.stage1 is None:
        raise ValueError("bimodal fusion needs stage1 parameters")
    q, kv = features[present[0]], features[present[1]]
    fused = cross_attention_stage(q, kv, params.stage1, params.tokens)
    return params.decoder(T.concat_cols(fused, q))


def predict(logits) -> tuple[np.ndarray, np.ndarray]:
    """Class indices (lowest index wins ties) and softmax probabilities."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    z = np.atleast_2d(z)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    return np.argmax(z, axis=1), probs


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

@dataclass
class ThoamModel:
    """Encoders plus fusion head for one (modality subset, fusion kind)."""

    encoders: E.EncoderParams
    head: ThoamParams
    present: tuple = MODALITIES
    fusion: str = "thoam"

    @classmethod
    def init(cls, seed: int, channels: int = 64, tokens: int = 8, vocab: int = E.DEFAULT_VOCAB,
             present=MODALITIES, fusion: str = "thoam") -> "ThoamModel":
        rng = np.random.default_rng(seed)
        enc = E.EncoderParams.init(rng, channels, vocab)
        head = ThoamParams.init(rng, channels, tokens, present, fusion)
        return cls(enc, head, canonical_subset(present), fusion)

    @property
    def channels(self) -> int:
        return self.head.channels

    def named(self) -> dict[str, Tensor]:
        """Trainable tensors, skipping encoders whose modality is absent."""
        skip = set()
        if "V" not in self.present:
            skip |= {"conv1_w", "conv1_b", "conv2_w", "conv2_b"}
        if "T" not in self.present:
            skip |= {"tab_w1", "tab_b1", "tab_w2", "tab_b2"}
        if "L" not in self.present:
            skip |= {"embed"}
        out = {f"enc.{k}": v for k, v in self.encoders.named().items() if k not in skip}
        out.update({f"head.{k}": v for k, v in self.head.named().items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def features(self, images=None, tabular=None, token_lists=None) -> dict:
        feats = {}
        if "V" in self.present:
            feats["V"] = T.gap(E.encode_visual(images, self.encoders))
        if "T" in self.present:
            feats["T"] = E.encode_tabular(tabular, self.encoders)
        if "L" in self.present:
            feats["L"] = E.encode_text(token_lists, self.encoders)
        return feats

    def logits(self, images=None, tabular=None, token_lists=None) -> Tensor:
        feats = self.features(images, tabular, token_lists)
        if self.fusion == "concat":
            h = feats[self.present[0]]
            for m in self.present[1:]:
                h = T.concat_cols(h, feats[m])
            return self.head.decoder(h)
        return fuse_subset(self.present, feats, self.head)

    def meta(self) -> dict:
        return {
            "channels": self.channels,
            "tokens": self.head.tokens,
            "vocab": self.encoders.vocab,
            "present": "".join(self.present),
            "fusion": self.fusion,
        }

    def save(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, {k: t.data for k, t in self.named().items()}, {**self.meta(), **(extra or {})})

    @classmethod
    def load(cls, path) -> tuple["ThoamModel", dict]:
        arrays, meta = load_checkpoint(path)
        model = cls.init(0, meta["channels"], meta["tokens"], meta["vocab"], tuple(meta["present"]), meta["fusion"])
        named = model.named()
        if set(named) != set(arrays):
            raise CheckpointError(f"checkpoint tensors {sorted(arrays)} do not match model {sorted(named)}")
        for k, t in named.items():
            if t.shape != arrays[k].shape:
                raise CheckpointError(f"{k}: checkpoint shape {arrays[k].shape} != model shape {t.shape}")
            t.data = arrays[k].copy()
        return model, meta


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write tensors as raw little-endian float64 after a JSON header.

    Layout: magic line, uint64 header length, header JSON (sorted keys),
    then each tensor's bytes in header order.
    """
    entries = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a vitalnet checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos:pos + hlen])
    body = memoryview(raw)[pos + hlen:]
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]
