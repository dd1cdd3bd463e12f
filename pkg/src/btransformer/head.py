"""Mean pooling over real tokens followed by an independent sigmoid per relation class."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from .encoder import xavier_uniform
from .errors import ContractError, ShapeError
from .tensor import Tensor, add, div, matmul, mul, sigmoid, transpose, tsum


@dataclass
class ClassifierParams:
    W: Tensor  # [C, d]
    b: Tensor  # [C]

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"classifier W {self.W.shape} and b {self.b.shape} are inconsistent")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, d: int, num_classes: int, rng: np.random.Generator) -> "ClassifierParams":
        W = Tensor(xavier_uniform(rng, num_classes, d), requires_grad=True)
        return cls(W=W, b=Tensor(np.zeros(num_classes), requires_grad=True))

    def parameters(self) -> Dict[str, Tensor]:
        return {"head.W": self.W, "head.b": self.b}


def mean_pool(Z: Tensor, mask) -> Tensor:
    """Average the rows of ``Z`` whose mask entry is true.

    Padding rows are left out of both the sum and the count, so the result
    does not depend on how much padding a batch carries.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != Z.shape[:-1]:
        raise ShapeError(f"mask shape {mask.shape} does not match rows of {Z.shape}")
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise ContractError("mean_pool needs at least one unmasked position")
    weights = mask.astype(np.float64)[..., None]
    return div(tsum(mul(Z, weights), axis=-2), counts.astype(np.float64)[..., None])


def classify(z_pool: Tensor, params: ClassifierParams) -> Tensor:
    """sigmoid(W z + b) for ``z_pool`` of shape ``[d]`` or ``[B, d]``."""
    if z_pool.shape[-1] != params.W.shape[1]:
        raise ShapeError(f"pooled width {z_pool.shape[-1]} does not match classifier width {params.W.shape[1]}")
    if z_pool.ndim == 1:
        logits = matmul(params.W, z_pool.reshape(-1, 1)).reshape(-1)
    else:
        logits = matmul(z_pool, transpose(params.W))
    return sigmoid(add(logits, params.b))


def predict_labels(probs, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    return (p >= threshold).astype(np.int64)
