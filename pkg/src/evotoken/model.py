"""Tiny bidirectional transformer over embeddings (hard rows or soft mixes).

The forward pass accepts any sequence of vectors in embedding space, not just
table rows, and runs full non-causal self-attention.  An optional per-layer
key/value store lets completed-prefix activations be reused (see decoding).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .data import MASK_ID
from .errors import CheckpointError, ConfigError, SequenceLengthError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"EVOTOKEN\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    max_len: int = 256
    seed: int = 0
    tie_output: bool = True

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4 (reserved ids)")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        for name in ("dim", "layers", "heads", "ffn_dim", "max_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


class TransformerParams:
    """All learnable tensors plus the config they were built for."""

    def __init__(self, config: ModelConfig, embedding, pos, blocks, final_g, final_b, out_proj=None):
        self.config = config
        self.embedding = embedding  # (V, D); row MASK_ID is the mask embedding
        self.pos = pos              # (max_len, D) learned absolute positions
        self.blocks: list[LayerParams] = blocks
        self.final_g = final_g
        self.final_b = final_b
        self.out_proj = out_proj    # (D, V) when untied, else None

    def all(self) -> list[Tensor]:
        out = [self.embedding, self.pos]
        for blk in self.blocks:
            out.extend(getattr(blk, f.name) for f in blk.__dataclass_fields__.values())
        out.extend([self.final_g, self.final_b])
        if self.out_proj is not None:
            out.append(self.out_proj)
        return out

    def named(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding, "pos": self.pos}
        for i, blk in enumerate(self.blocks):
            for f in blk.__dataclass_fields__.values():
                out[f"block{i}.{f.name}"] = getattr(blk, f.name)
        out["final_g"] = self.final_g
        out["final_b"] = self.final_b
        if self.out_proj is not None:
            out["out_proj"] = self.out_proj
        return out

    def num_params(self) -> int:
        return sum(t.size for t in self.all())

    def mask_embedding(self) -> np.ndarray:
        return self.embedding.data[MASK_ID]

    def fingerprint(self) -> tuple:
        # cheap change detector for cache invalidation, not a cryptographic hash
        return (float(self.embedding.data.sum()), float(self.blocks[0].wq.data.sum()))


def init_params(config: ModelConfig) -> TransformerParams:
    """Scaled-normal init (std 0.02, residual projections shrunk by 1/sqrt(2L))."""
    rng = np.random.default_rng(config.seed)
    dt = T.get_default_dtype()
    std = 0.02
    resid_std = std / np.sqrt(2.0 * config.layers)

    def normal(shape, s=std):
        return T.parameter(rng.normal(0.0, s, size=shape).astype(dt))

    def zeros(shape):
        return T.parameter(np.zeros(shape, dtype=dt))

    def ones(shape):
        return T.parameter(np.ones(shape, dtype=dt))

    d, f = config.dim, config.ffn_dim
    embedding = normal((config.vocab_size, d))
    pos = normal((config.max_len, d))
    blocks = []
    for _ in range(config.layers):
        blocks.append(
            LayerParams(
                ln1_g=ones(d), ln1_b=zeros(d),
                wq=normal((d, d)), bq=zeros(d),
                wk=normal((d, d)), bk=zeros(d),
                wv=normal((d, d)), bv=zeros(d),
                wo=normal((d, d), resid_std), bo=zeros(d),
                ln2_g=ones(d), ln2_b=zeros(d),
                w1=normal((d, f)), b1=zeros(f),
                w2=normal((f, d), resid_std), b2=zeros(d),
            )
        )
    final_g, final_b = ones(d), zeros(d)
    out_proj = None if config.tie_output else normal((d, config.vocab_size))
    return TransformerParams(config, embedding, pos, blocks, final_g, final_b, out_proj)


def embed_tokens(params: TransformerParams, ids) -> Tensor:
    """Row lookup in the embedding table; differentiable w.r.t. the table."""
    return T.take_rows(params.embedding, np.asarray(ids, dtype=np.int64))


def forward(
    params: TransformerParams,
    embeddings,
    *,
    use_positions: bool = True,
    pos_offset: int = 0,
    kv_cache=None,
    return_kv: bool = False,
):
    """Per-position vocabulary logits for a sequence of embedding vectors.

    ``embeddings`` is (seq, D), a Tensor or plain array.  With ``kv_cache``
    (per-layer list of (k, v) arrays for an already-processed prefix) only the
    given suffix is computed; its queries attend over prefix and suffix keys.
    ``return_kv`` additionally returns this call's per-layer suffix (k, v)
    arrays so callers can extend a prefix cache.
    """
    cfg = params.config
    x = embeddings if isinstance(embeddings, Tensor) else Tensor(np.asarray(embeddings))
    seq = x.shape[0]
    if pos_offset + seq > cfg.max_len:
        raise SequenceLengthError(
            f"sequence of {pos_offset + seq} exceeds max length {cfg.max_len}"
        )
    if use_positions:
        pos_rows = T.take_rows(params.pos, np.arange(pos_offset, pos_offset + seq))
        x = T.add(x, pos_rows)

    heads, hd = cfg.heads, cfg.dim // cfg.heads
    scale = 1.0 / np.sqrt(hd)
    new_kv = []
    for li, blk in enumerate(params.blocks):
        h = T.layer_norm(x, blk.ln1_g, blk.ln1_b)
        q = T.add(T.matmul(h, blk.wq), blk.bq)
        k = T.add(T.matmul(h, blk.wk), blk.bk)
        v = T.add(T.matmul(h, blk.wv), blk.bv)
        # (seq, D) -> (heads, seq, hd)
        qh = T.transpose(T.reshape(q, (seq, heads, hd)), (1, 0, 2))
        kh = T.transpose(T.reshape(k, (seq, heads, hd)), (1, 0, 2))
        vh = T.transpose(T.reshape(v, (seq, heads, hd)), (1, 0, 2))
        if return_kv:
            new_kv.append((kh.data, vh.data))
        if kv_cache is not None and kv_cache[li] is not None:
            ck, cv = kv_cache[li]
            kh = Tensor(np.concatenate([ck, kh.data], axis=1))
            vh = Tensor(np.concatenate([cv, vh.data], axis=1))
        scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 2, 1))), scale)
        attn = T.softmax(scores)
        ctx = T.matmul(attn, vh)  # (heads, seq, hd)
        ctx = T.reshape(T.transpose(ctx, (1, 0, 2)), (seq, cfg.dim))
        x = T.add(x, T.add(T.matmul(ctx, blk.wo), blk.bo))

        h2 = T.layer_norm(x, blk.ln2_g, blk.ln2_b)
        ff = T.add(T.matmul(T.gelu(T.add(T.matmul(h2, blk.w1), blk.b1)), blk.w2), blk.b2)
        x = T.add(x, ff)

    x = T.layer_norm(x, params.final_g, params.final_b)
    if params.out_proj is not None:
        logits = T.matmul(x, params.out_proj)
    else:
        logits = T.matmul(x, T.transpose(params.embedding))
    return (logits, new_kv) if return_kv else logits


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, JSON header, named little-endian tensors
# ---------------------------------------------------------------------------

_DTYPE_CODES = {np.dtype(np.float32): b"\x00", np.dtype(np.float64): b"\x01"}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path, params: TransformerParams, vocab_symbols: str | None = None) -> None:
    header = {"model": asdict(params.config)}
    if vocab_symbols is not None:
        header["vocab_symbols"] = vocab_symbols
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    named = params.named()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(named)))
        for name, t in named.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(_DTYPE_CODES[t.data.dtype])
            fh.write(struct.pack("<B", t.data.ndim))
            for extent in t.data.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path):
    """Returns (TransformerParams, vocab_symbols or None)."""
    with open(path, "rb") as fh:
        buf = io.BufferedReader(fh)
        magic = buf.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", buf.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack("<I", buf.read(4))
        header = json.loads(buf.read(hlen).decode("utf-8"))
        config = ModelConfig(**header["model"])
        (count,) = struct.unpack("<I", buf.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", buf.read(2))
            name = buf.read(nlen).decode("utf-8")
            code = buf.read(1)[0]
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code}")
            dt = _CODE_DTYPES[code]
            (ndim,) = struct.unpack("<B", buf.read(1))
            shape = tuple(struct.unpack("<Q", buf.read(8))[0] for _ in range(ndim))
            nbytes = int(np.prod(shape)) * dt.itemsize if shape else dt.itemsize
            raw = buf.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))

    params = init_params(config)
    named = params.named()
    missing = set(named) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    for name, t in named.items():
        arr = tensors[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {arr.shape}")
        t.data = arr.copy()
    return params, header.get("vocab_symbols")
