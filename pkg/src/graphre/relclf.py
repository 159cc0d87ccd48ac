"""Entity-pair scoring, multi-label decoding and the pair loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np
import torch
from torch import nn

from graphre.corpus import LABEL_INDEX, LABELS, NUM_LABELS, RELATED_TO
from graphre.gnn import DimensionMismatch

RELATED_TO_INDEX = LABEL_INDEX[RELATED_TO]


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@dataclass(frozen=True)
class PairScore:
    head: int
    tail: int
    logits: np.ndarray
    probabilities: np.ndarray

    @classmethod
    def from_logits(cls, head: int, tail: int, logits) -> "PairScore":
        logits = np.asarray(logits, dtype=float)
        return cls(head, tail, logits, sigmoid(logits))


@dataclass(frozen=True)
class DecodePolicy:
    threshold: float = 0.5
    multi_label: bool = True

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")


def pair_features(head, tail):
    """``[head; tail; head * tail]`` for numpy vectors or (batched) tensors."""
    if tuple(head.shape) != tuple(tail.shape):
        raise DimensionMismatch(f"pair dims differ: {tuple(head.shape)} vs {tuple(tail.shape)}")
    if torch.is_tensor(head):
        return torch.cat([head, tail, head * tail], dim=-1)
    return np.concatenate([head, tail, head * tail], axis=-1)


def score_pair(fused_head, fused_tail, weight, bias=None, head: int = 0, tail: int = 1) -> PairScore:
    """Logits from a linear map of the pair features; ``weight`` is ``(17, 3d)``."""
    feats = pair_features(np.asarray(fused_head, float), np.asarray(fused_tail, float))
    weight = np.asarray(weight, float)
    if weight.shape != (NUM_LABELS, feats.shape[0]):
        raise DimensionMismatch(f"weight shape {weight.shape} does not fit features of size {feats.shape[0]}")
    logits = weight @ feats + (0.0 if bias is None else np.asarray(bias, float))
    return PairScore.from_logits(head, tail, logits)


def decode_labels(score: Union[PairScore, np.ndarray], policy: DecodePolicy = DecodePolicy()) -> frozenset[str]:
    """Labels above threshold, or ``{RELATED-TO}`` when none of the other 16 fire.

    The RELATED-TO output itself is ignored in multi-label mode. In
    single-label mode the arg-max label is returned.
    """
    probs = score.probabilities if isinstance(score, PairScore) else np.asarray(score, float)
    if not policy.multi_label:
        return frozenset({LABELS[int(np.argmax(probs))]})
    chosen = {LABELS[i] for i in range(NUM_LABELS) if i != RELATED_TO_INDEX and probs[i] > policy.threshold}
    return frozenset(chosen) if chosen else frozenset({RELATED_TO})


def gold_vector(labels: Iterable[str]) -> np.ndarray:
    y = np.zeros(NUM_LABELS)
    for lab in labels:
        y[LABEL_INDEX[lab]] = 1.0
    return y


def pair_loss(score: Union[PairScore, np.ndarray], gold: Iterable[str]) -> float:
    """Summed binary cross-entropy over the 17 labels (computed from logits)."""
    z = score.logits if isinstance(score, PairScore) else np.asarray(score, float)
    y = gold_vector(gold)
    # softplus(z) - y*z == -[y log p + (1-y) log(1-p)]
    return float(np.sum(np.logaddexp(0.0, z) - y * z))


def pair_loss_grad(score: Union[PairScore, np.ndarray], gold: Iterable[str]) -> np.ndarray:
    """d pair_loss / d logits."""
    z = score.logits if isinstance(score, PairScore) else np.asarray(score, float)
    return sigmoid(z) - gold_vector(gold)


def pair_loss_param_grads(fused_head, fused_tail, weight, bias, gold) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`pair_loss` w.r.t. the scorer's ``weight`` and ``bias``."""
    score = score_pair(fused_head, fused_tail, weight, bias)
    delta = pair_loss_grad(score, gold)
    feats = pair_features(np.asarray(fused_head, float), np.asarray(fused_tail, float))
    return np.outer(delta, feats), delta


class PairClassifier(nn.Module):
    def __init__(self, dim: int, num_labels: int = NUM_LABELS):
        super().__init__()
        self.linear = nn.Linear(3 * dim, num_labels)

    def forward(self, heads: torch.Tensor, tails: torch.Tensor) -> torch.Tensor:
        return self.linear(pair_features(heads, tails))


def batch_loss(logits: torch.Tensor, targets: torch.Tensor, multi_label: bool = True) -> torch.Tensor:
    """Mean over pairs of the per-pair loss.

    Multi-label: summed BCE over labels. Single-label: cross-entropy against
    the first gold label (lowest label index).
    """
    if multi_label:
        per_pair = nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none").sum(dim=1)
        return per_pair.mean()
    return nn.functional.cross_entropy(logits, targets.argmax(dim=1))
