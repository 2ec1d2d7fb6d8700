"""
Micro transformer encoders.

A BERT-style post-norm encoder with learned positions and [CLS] pooling,
used three ways: the query encoder and the document encoder of the
retriever (:class:`BiEncoder`), and the cross-encoder with a scalar head
(:class:`CrossEncoder`).
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn.functional as F
from torch import nn

from medsearch import constants
from medsearch.exceptions import ConfigurationError, NumericFailureError
from medsearch.validation import ConfigDictMixin


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig(ConfigDictMixin):
    """Shape and seed of a micro encoder; every tensor shape follows from it."""
    hidden_size: int = constants.DEFAULT_HIDDEN_SIZE
    num_layers: int = constants.DEFAULT_NUM_LAYERS
    num_heads: int = constants.DEFAULT_NUM_HEADS
    ffn_size: int = constants.DEFAULT_FFN_SIZE
    vocab_size: int = constants.DEFAULT_VOCAB_SIZE
    max_query_length: int = constants.DEFAULT_MAX_QUERY_LENGTH
    max_document_length: int = constants.DEFAULT_MAX_DOCUMENT_LENGTH
    max_cross_length: int = constants.DEFAULT_MAX_CROSS_LENGTH
    seed: int = 0

    def __post_init__(self):
        for name in ('hidden_size', 'num_layers', 'num_heads', 'ffn_size', 'vocab_size'):
            if getattr(self, name) < 1:
                raise ConfigurationError(
                    message=f"EncoderConfig.{name} must be >= 1",
                    context={name: getattr(self, name)}
                )
        if self.hidden_size % self.num_heads:
            raise ConfigurationError(
                message=f"num_heads {self.num_heads} must divide hidden_size {self.hidden_size}",
                context={'hidden_size': self.hidden_size, 'num_heads': self.num_heads}
            )
        for name in ('max_query_length', 'max_document_length', 'max_cross_length'):
            if getattr(self, name) < 3:
                raise ConfigurationError(
                    message=f"EncoderConfig.{name} must be >= 3 (room for CLS/SEP)",
                    context={name: getattr(self, name)}
                )

    @property
    def max_positions(self) -> int:
        return max(self.max_query_length, self.max_document_length, self.max_cross_length)


class EncoderLayer(nn.Module):
    """Multi-head self-attention and feed-forward block, post-norm."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        hidden = config.hidden_size
        self.num_heads = config.num_heads
        self.head_size = hidden // config.num_heads
        self.query = nn.Linear(hidden, hidden)
        self.key = nn.Linear(hidden, hidden)
        self.value = nn.Linear(hidden, hidden)
        self.attention_output = nn.Linear(hidden, hidden)
        self.attention_norm = nn.LayerNorm(hidden, eps=constants.LAYER_NORM_EPS)
        self.intermediate = nn.Linear(hidden, config.ffn_size)
        self.output = nn.Linear(config.ffn_size, hidden)
        self.output_norm = nn.LayerNorm(hidden, eps=constants.LAYER_NORM_EPS)

    def forward(self, hidden: torch.Tensor, padding_mask: torch.Tensor) -> torch.Tensor:
        batch, width, size = hidden.shape

        def heads(x: torch.Tensor) -> torch.Tensor:
            return x.view(batch, width, self.num_heads, self.head_size).transpose(1, 2)

        q, k, v = heads(self.query(hidden)), heads(self.key(hidden)), heads(self.value(hidden))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_size)
        scores = scores.masked_fill(padding_mask[:, None, None, :], float('-inf'))
        context = (scores.softmax(dim=-1) @ v).transpose(1, 2).reshape(batch, width, size)
        hidden = self.attention_norm(hidden + self.attention_output(context))
        return self.output_norm(hidden + self.output(F.gelu(self.intermediate(hidden))))


class TransformerEncoder(nn.Module):
    """Token + position embeddings, L layers, final-layer [CLS] vector."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.token_embeddings = nn.Embedding(config.vocab_size, config.hidden_size)
        self.position_embeddings = nn.Embedding(config.max_positions, config.hidden_size)
        self.embedding_norm = nn.LayerNorm(config.hidden_size, eps=constants.LAYER_NORM_EPS)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.num_layers))

    def forward(self, input_ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Return the [CLS] vectors, shape ``(batch, hidden)``."""
        width = input_ids.shape[1]
        positions = torch.arange(width, device=input_ids.device)
        padding_mask = positions[None, :] >= lengths[:, None]
        hidden = self.token_embeddings(input_ids) + self.position_embeddings(positions)[None, :, :]
        hidden = self.embedding_norm(hidden)
        for layer in self.layers:
            hidden = layer(hidden, padding_mask)
        pooled = hidden[:, 0, :]
        ensure_finite(pooled, 'encoder output')
        return pooled


class BiEncoder(nn.Module):
    """Retriever: separate query and document encoders sharing one config."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.query_encoder = TransformerEncoder(config)
        self.doc_encoder = TransformerEncoder(config)
        initialize(self, config.seed)


class CrossEncoder(nn.Module):
    """Re-ranker: one encoder over the concatenated pair plus ``W^T h_CLS + b``."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = TransformerEncoder(config)
        self.head = nn.Linear(config.hidden_size, 1)
        initialize(self, config.seed)

    def forward(self, input_ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        scores = self.head(self.encoder(input_ids, lengths)).squeeze(-1)
        ensure_finite(scores, 'cross-encoder score')
        return scores


def initialize(model: nn.Module, seed: int, std: float = constants.INIT_STD) -> None:
    """
    Seeded init: N(0, std) for weight matrices and embeddings, zeros for
    biases, ones/zeros for layer norms. Parameters are visited in
    registration order so the result depends only on (config, seed).
    """
    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, (nn.Linear, nn.Embedding)):
                weight = torch.randn(module.weight.shape, generator=generator, dtype=torch.float32) * std
                module.weight.copy_(weight)
                if getattr(module, 'bias', None) is not None:
                    module.bias.zero_()


def ensure_finite(tensor: torch.Tensor, what: str) -> None:
    if not torch.isfinite(tensor).all():
        raise NumericFailureError(
            message=f"Non-finite values in {what}",
            context={'what': what, 'shape': list(tensor.shape)}
        )


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def named_parameters(model: nn.Module) -> Dict[str, torch.Tensor]:
    """The ParameterSet view: name -> tensor, in registration order."""
    return dict(model.named_parameters())


def build_model(kind: str, config: EncoderConfig, dtype: Optional[torch.dtype] = None) -> nn.Module:
    """Construct a 'retriever' (BiEncoder) or 'reranker' (CrossEncoder)."""
    if kind == 'retriever':
        model: nn.Module = BiEncoder(config)
    elif kind == 'reranker':
        model = CrossEncoder(config)
    else:
        raise ConfigurationError(message=f"Unknown model kind {kind!r}", context={'kind': kind})
    if dtype is not None:
        model = model.to(dtype)
    return model
