"""Token vocabulary and the embedding provider that stands in for a pretrained body.

Two provider modes exist:

* ``trainable`` -- a ``|V| x d`` table, fine-tuned with the rest of the model
  unless frozen;
* ``precomputed`` -- fixed vectors read from a text file, keyed by token id.
"""

from __future__ import annotations

import os
import re
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ContractError, DataError, FormatError
from .tensor import Tensor, take_rows

PAD, UNK = "<pad>", "<unk>"
E1_OPEN, E1_CLOSE = "<e1>", "</e1>"
E2_OPEN, E2_CLOSE = "<e2>", "</e2>"
RESERVED = (PAD, UNK, E1_OPEN, E1_CLOSE, E2_OPEN, E2_CLOSE)
MARKERS = (E1_OPEN, E1_CLOSE, E2_OPEN, E2_CLOSE)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> List[str]:
    """Lowercased word-level tokens; punctuation marks become their own tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Dense token <-> id map. Ids 0..5 are always the reserved tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: List[str] = list(RESERVED)
        self._stoi: Dict[str, int] = {t: i for i, t in enumerate(self._itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self._stoi:
            self._stoi[token] = len(self._itos)
            self._itos.append(token)
        return self._stoi[token]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        vocab = cls()
        for text in texts:
            for tok in tokenize(text):
                vocab.add(tok)
        return vocab

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def id_of(self, token: str) -> int:
        return self._stoi.get(token, self.unk_id)

    def token_of(self, idx: int) -> str:
        return self._itos[idx]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.id_of(t) for t in tokens]

    @property
    def tokens(self) -> List[str]:
        return list(self._itos)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise FormatError("vocabulary does not start with the reserved tokens")
        vocab = cls()
        for tok in tokens[len(RESERVED):]:
            if tok in vocab._stoi:
                raise FormatError(f"duplicate vocabulary token {tok!r}")
            vocab.add(tok)
        return vocab

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos


class EmbeddingProvider:
    """Maps token ids to d-dimensional vectors.

    Args:
        mode: ``"trainable"`` or ``"precomputed"``.
        dim: embedding width d.
        table: the ``|V| x d`` tensor in trainable mode.
        vectors: id -> vector mapping in precomputed mode.
        max_seq_len: longest sequence :meth:`embed` accepts.
    """

    def __init__(
        self,
        mode: str,
        dim: int,
        table: Optional[Tensor] = None,
        vectors: Optional[Dict[int, np.ndarray]] = None,
        max_seq_len: Optional[int] = None,
    ):
        if mode not in ("trainable", "precomputed"):
            raise ContractError(f"unknown embedding mode {mode!r}")
        if dim <= 0:
            raise ContractError(f"embedding dimension must be positive, got {dim}")
        self.mode = mode
        self.dim = dim
        self.max_seq_len = max_seq_len
        self.table = table
        self.vectors = vectors if vectors is not None else {}
        if mode == "trainable":
            if table is None or table.ndim != 2 or table.shape[1] != dim:
                raise ContractError("trainable mode needs a |V| x d table")
        else:
            self._ids = np.array(sorted(self.vectors), dtype=np.int64)
            self._matrix = (
                np.stack([self.vectors[i] for i in self._ids]) if len(self._ids) else np.zeros((0, dim))
            )

    @classmethod
    def trainable(
        cls, vocab_size: int, dim: int, rng: np.random.Generator, max_seq_len: Optional[int] = None
    ) -> "EmbeddingProvider":
        table = Tensor(rng.uniform(-0.05, 0.05, size=(vocab_size, dim)), requires_grad=True, name="embed.table")
        return cls("trainable", dim, table=table, max_seq_len=max_seq_len)

    def __len__(self) -> int:
        return self.table.shape[0] if self.mode == "trainable" else len(self.vectors)

    def embed(self, tokens) -> Tensor:
        """Look up ``tokens`` (shape ``[T]`` or ``[B, T]``) and return ``[..., T, d]``."""
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 0 or ids.shape[-1] < 1:
            raise ContractError("embed needs at least one token")
        if self.max_seq_len is not None and ids.shape[-1] > self.max_seq_len:
            raise ContractError(
                f"sequence length {ids.shape[-1]} exceeds max_seq_len {self.max_seq_len}; truncate first"
            )
        if self.mode == "trainable":
            if ids.min() < 0 or ids.max() >= self.table.shape[0]:
                bad = ids[(ids < 0) | (ids >= self.table.shape[0])].reshape(-1)[0]
                raise ContractError(f"token id {bad} outside vocabulary of size {self.table.shape[0]}")
            return take_rows(self.table, ids)
        pos = np.searchsorted(self._ids, ids)
        pos = np.minimum(pos, max(len(self._ids) - 1, 0))
        found = (self._ids[pos] == ids) if len(self._ids) else np.zeros(ids.shape, dtype=bool)
        if not found.all():
            raise DataError(f"token id {int(ids[~found].reshape(-1)[0])} has no precomputed vector")
        return Tensor(self._matrix[pos])

    def parameters(self) -> Dict[str, Tensor]:
        return {"embed.table": self.table} if self.mode == "trainable" else {}


def save_precomputed(provider: EmbeddingProvider, path: str) -> None:
    """Write the provider's vectors in the ``d=<int>`` + ``<id> <v1> ... <vd>`` text format."""
    if provider.mode == "trainable":
        rows = enumerate(provider.table.data)
    else:
        rows = sorted(provider.vectors.items())
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(f"d={provider.dim}\n")
        for idx, vec in rows:
            fh.write(str(idx) + " " + " ".join(repr(float(v)) for v in vec) + "\n")
    os.replace(tmp, path)


def load_precomputed(path: str, max_seq_len: Optional[int] = None) -> EmbeddingProvider:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        m = re.fullmatch(r"d=(\d+)", header.strip())
        if not m or int(m.group(1)) <= 0:
            raise FormatError(f"{path}:1: expected header 'd=<positive int>', got {header!r}")
        dim = int(m.group(1))
        vectors: Dict[int, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            fields = line.split()
            if not fields:
                continue
            try:
                idx = int(fields[0])
                values = [float(v) for v in fields[1:]]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: unparsable entry") from None
            if len(values) != dim:
                raise FormatError(f"{path}:{lineno}: vector has {len(values)} values, header says d={dim}")
            if idx in vectors:
                raise FormatError(f"{path}:{lineno}: duplicate token id {idx}")
            vectors[idx] = np.array(values, dtype=np.float64)
    return EmbeddingProvider("precomputed", dim, vectors=vectors, max_seq_len=max_seq_len)
