"""
Contrastive losses and click weighting.
"""
import math
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from encoder.network import ensure_finite
from medsearch.exceptions import (
    ConfigurationError,
    EmptyNegativesError,
    InsufficientBatchError,
    InvalidClickCountError,
    ShapeMismatchError,
)


WEIGHT_SUM_TOLERANCE = 1e-6


def click_weights(clicks: Sequence[int]) -> np.ndarray:
    """``w_i = log2(c_i + 1) / sum_k log2(c_k + 1)`` as float64."""
    counts = np.asarray(list(clicks), dtype=np.float64)
    if counts.size == 0:
        raise ConfigurationError(message="click_weights needs at least one count")
    if (counts < 1).any():
        raise InvalidClickCountError(
            message="Click counts must all be >= 1",
            context={'min_clicks': float(counts.min())}
        )
    raw = np.log2(counts + 1.0)
    return raw / math.fsum(raw)


def _weights_tensor(weights: Union[Sequence[float], np.ndarray, torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    if isinstance(weights, torch.Tensor):
        return weights.to(dtype=like.dtype, device=like.device)
    return torch.as_tensor(np.asarray(weights, dtype=np.float64), dtype=like.dtype, device=like.device)


def retriever_batch_loss(q_embs: torch.Tensor, d_embs: torch.Tensor,
                         weights, alpha: float) -> torch.Tensor:
    """
    ``alpha * L_q2d + (1 - alpha) * L_d2q`` over the in-batch score matrix
    ``S = Q D^T``; row i's positive is column i.
    """
    if q_embs.dim() != 2 or q_embs.shape != d_embs.shape:
        raise ShapeMismatchError(
            message="Query and document embeddings must both be B x h",
            context={'q_shape': list(q_embs.shape), 'd_shape': list(d_embs.shape)}
        )
    batch = q_embs.shape[0]
    if batch < 2:
        raise InsufficientBatchError(message=f"In-batch negatives need B >= 2, got {batch}", context={'batch_size': batch})
    w = _weights_tensor(weights, q_embs)
    if w.shape != (batch,):
        raise ShapeMismatchError(message="One weight per instance is required",
                                 context={'weights': list(w.shape), 'batch_size': batch})
    if abs(float(w.sum()) - 1.0) > WEIGHT_SUM_TOLERANCE:
        raise ConfigurationError(message="Instance weights must sum to 1", context={'sum': float(w.sum())})
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(message=f"alpha must lie in [0, 1], got {alpha}", context={'alpha': alpha})

    scores = q_embs @ d_embs.T
    q2d = -F.log_softmax(scores, dim=1).diagonal()
    d2q = -F.log_softmax(scores, dim=0).diagonal()
    loss = alpha * (w * q2d).sum() + (1.0 - alpha) * (w * d2q).sum()
    ensure_finite(loss.detach(), 'retriever loss')
    return loss


def reranker_loss(pos_score: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """``-log softmax`` of the positive against its negatives."""
    neg_scores = torch.as_tensor(neg_scores).reshape(-1)
    if neg_scores.numel() == 0:
        raise EmptyNegativesError(message="reranker_loss needs at least one negative score")
    pos_score = torch.as_tensor(pos_score).reshape(1).to(neg_scores.dtype)
    scores = torch.cat([pos_score, neg_scores])
    ensure_finite(scores.detach(), 'reranker scores')
    return -F.log_softmax(scores, dim=0)[0]
