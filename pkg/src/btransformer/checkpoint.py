"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BT18"                 magic
    u16                     format version
    u32 + bytes             UTF-8 ``key = value`` block (config, vocabulary, embedding mode)
    u32                     number of tensors
    per tensor:
        u16 + bytes         UTF-8 name
        u8                  rank
        u32 * rank          dims
        f64 * prod(dims)    row-major data
"""

from __future__ import annotations

import os
import struct
from typing import Dict, Tuple

import numpy as np

from .config import ModelConfig, format_config, parse_key_values
from .embeddings import EmbeddingProvider, Vocabulary
from .encoder import EncoderLayerParams, EncoderStack
from .errors import ConfigError, FormatError
from .head import ClassifierParams
from .model import BTransformer
from .tensor import Tensor

MAGIC = b"BT18"
VERSION = 1


def _meta(model: BTransformer) -> Dict[str, object]:
    meta: Dict[str, object] = dict(model.config.to_dict())
    meta["embedding_mode"] = model.embeddings.mode
    meta["vocab"] = " ".join(model.vocab.tokens)
    return meta


def _tensors(model: BTransformer) -> Dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in model.parameters().items()}
    if model.embeddings.mode == "precomputed":
        emb = model.embeddings
        arrays["embed.precomputed.ids"] = emb._ids.astype(np.float64)
        arrays["embed.precomputed.vectors"] = emb._matrix
    return arrays


def checkpoint_bytes(model: BTransformer) -> bytes:
    config_blob = format_config(_meta(model)).encode("utf-8")
    arrays = _tensors(model)
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(config_blob)), config_blob,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: BTransformer, path: str) -> None:
    """Write atomically: a temp file is renamed into place only once complete."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(model))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"checkpoint truncated while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(blob: bytes) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint: bad magic bytes")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n_cfg,) = r.unpack("<I", "config length")
    try:
        meta = parse_key_values(r.take(n_cfg, "config block").decode("utf-8"), "checkpoint config")
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"corrupt checkpoint config block: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H", "tensor name length")
        try:
            name = r.take(n_name, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("corrupt tensor name") from None
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * n, f"data of {name}"), dtype="<f8").astype(np.float64)
        arrays[name] = data.reshape(dims)
    if r.pos != len(blob):
        raise FormatError(f"checkpoint has {len(blob) - r.pos} unexpected trailing bytes")
    return meta, arrays


def load_checkpoint(path: str) -> BTransformer:
    """Rebuild the model (config, vocabulary, every parameter) from ``path``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    meta, arrays = parse_checkpoint(blob)
    try:
        vocab = Vocabulary.from_tokens(meta.pop("vocab").split(" "))
        mode = meta.pop("embedding_mode")
        config = ModelConfig.from_mapping(meta)
    except KeyError as exc:
        raise FormatError(f"checkpoint config block lacks {exc}") from None
    except ConfigError as exc:
        raise FormatError(f"checkpoint config invalid: {exc}") from None

    def grab(name: str) -> Tensor:
        if name not in arrays:
            raise FormatError(f"checkpoint lacks tensor {name!r}")
        return Tensor(arrays.pop(name), requires_grad=True)

    if mode == "trainable":
        table = grab("embed.table")
        if table.shape != (len(vocab), config.d):
            raise FormatError(
                f"embedding table {table.shape} does not match vocabulary size {len(vocab)} and d={config.d}"
            )
        embeddings = EmbeddingProvider("trainable", config.d, table=table, max_seq_len=config.max_seq_len)
    elif mode == "precomputed":
        ids = grab("embed.precomputed.ids").data.astype(np.int64)
        vectors = grab("embed.precomputed.vectors").data
        if vectors.shape != (len(ids), config.d):
            raise FormatError("precomputed vectors do not match d")
        embeddings = EmbeddingProvider(
            "precomputed", config.d, vectors={int(i): v for i, v in zip(ids, vectors)},
            max_seq_len=config.max_seq_len,
        )
    else:
        raise FormatError(f"unknown embedding mode {mode!r}")

    layers = []
    for i in range(config.num_layers):
        fields = {n: grab(f"encoder.layer{i}.{n}") for n in
                  ("Wq", "Wk", "Wv", "Wo", "W1", "b1", "W2", "b2",
                   "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")}
        try:
            layers.append(EncoderLayerParams(num_heads=config.num_heads, **fields))
        except ValueError as exc:
            raise FormatError(f"layer {i}: {exc}") from None
    encoder = EncoderStack(layers, grab("encoder.positional"), config.dropout)
    if encoder.positional.shape != (config.max_seq_len, config.d):
        raise FormatError("positional table does not match max_seq_len x d")
    try:
        head = ClassifierParams(grab("head.W"), grab("head.b"))
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    if head.W.shape != (config.num_classes, config.d):
        raise FormatError("classifier shape does not match num_classes x d")
    if arrays:
        raise FormatError(f"checkpoint has unexpected tensors: {', '.join(sorted(arrays))}")
    return BTransformer(config, vocab, embeddings, encoder, head)
