"""The full classifier: embeddings -> encoder stack -> mean pooling -> sigmoid head."""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from .config import ModelConfig
from .errors import ConfigError
from .embeddings import EmbeddingProvider, Vocabulary
from .encoder import EncoderStack, encode
from .head import ClassifierParams, classify, mean_pool, predict_labels
from .tensor import Tensor, dropout, no_grad


class BTransformer:
    def __init__(
        self,
        config: ModelConfig,
        vocab: Vocabulary,
        embeddings: EmbeddingProvider,
        encoder: EncoderStack,
        head: ClassifierParams,
    ):
        self.config = config
        self.vocab = vocab
        self.embeddings = embeddings
        self.encoder = encoder
        self.head = head

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        vocab: Vocabulary,
        embeddings: Optional[EmbeddingProvider] = None,
    ) -> "BTransformer":
        """Fresh model; all initialisation draws from a generator seeded by ``config.seed``."""
        rng = np.random.default_rng(config.seed)
        if embeddings is None:
            embeddings = EmbeddingProvider.trainable(len(vocab), config.d, rng, config.max_seq_len)
        elif embeddings.dim != config.d:
            raise ConfigError(f"embedding width {embeddings.dim} does not match d={config.d}")
        encoder = EncoderStack.init(
            config.d, config.num_layers, config.num_heads, config.ffn_width,
            config.max_seq_len, config.dropout, rng,
        )
        head = ClassifierParams.init(config.d, config.num_classes, rng)
        return cls(config, vocab, embeddings, encoder, head)

    def parameters(self) -> Dict[str, Tensor]:
        """Every tensor that is saved in a checkpoint, keyed by a stable name."""
        params: Dict[str, Tensor] = {}
        params.update(self.embeddings.parameters())
        params.update(self.encoder.parameters())
        params.update(self.head.parameters())
        return params

    def trainable_parameters(self) -> Dict[str, Tensor]:
        params = self.parameters()
        if self.config.freeze_body:
            params.pop("embed.table", None)
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def forward(
        self,
        token_ids: np.ndarray,
        mask: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Relation probabilities, ``[C]`` for one sequence or ``[B, C]`` for a batch."""
        H = self.embeddings.embed(token_ids)
        Z = encode(H, self.encoder, mask, training, rng)
        pooled = mean_pool(Z, mask)
        pooled = dropout(pooled, self.config.dropout, training, rng)
        return classify(pooled, self.head)

    def predict_proba(self, token_ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(token_ids, mask, training=False).data

    def predict(self, token_ids: np.ndarray, mask: np.ndarray, threshold: Optional[float] = None) -> np.ndarray:
        probs = self.predict_proba(token_ids, mask)
        return predict_labels(probs, self.config.threshold if threshold is None else threshold)
