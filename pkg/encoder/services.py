"""
Encoder operations used by training, retrieval and evaluation.

Single-sequence calls run the encoder on the sequence trimmed to its real
length, so a vector never depends on how much padding it came with or on
which other sequences shared a batch. Training uses the padded batch path
in :func:`encode_batch`.
"""
import logging
from typing import Dict, Sequence, Union

import torch
from torch import nn

from medsearch.exceptions import BackwardWithoutForwardError, ConfigurationError

from .network import BiEncoder, CrossEncoder, TransformerEncoder, ensure_finite
from .tokenization import TokenSequence, cross_layout, to_batch, tokenize, tokenize_document
from .vocab import Vocabulary


logger = logging.getLogger(__name__)

EncoderLike = Union[BiEncoder, TransformerEncoder]


def query_encoder(model: EncoderLike) -> TransformerEncoder:
    return model.query_encoder if isinstance(model, BiEncoder) else model


def doc_encoder(model: EncoderLike) -> TransformerEncoder:
    return model.doc_encoder if isinstance(model, BiEncoder) else model


def _check_fits(encoder: TransformerEncoder, sequence: TokenSequence) -> None:
    if sequence.length > encoder.config.max_positions:
        raise ConfigurationError(
            message=f"Sequence of length {sequence.length} exceeds encoder positions {encoder.config.max_positions}",
            context={'length': sequence.length, 'max_positions': encoder.config.max_positions}
        )


def _run_single(encoder: TransformerEncoder, sequence: TokenSequence) -> torch.Tensor:
    _check_fits(encoder, sequence)
    device = encoder.token_embeddings.weight.device
    input_ids = torch.tensor([sequence.ids[:sequence.length]], dtype=torch.long, device=device)
    lengths = torch.tensor([sequence.length], dtype=torch.long, device=device)
    return encoder(input_ids, lengths)[0]


def encode_query(model: EncoderLike, q: TokenSequence) -> torch.Tensor:
    """E(q): final-layer [CLS] vector of the query encoder, length h."""
    return _run_single(query_encoder(model), q)


def encode_document(model: EncoderLike, vocab: Vocabulary, title: str, abstract: str) -> torch.Tensor:
    """E(d) over ``[CLS] title [SEP] abstract [SEP]``."""
    encoder = doc_encoder(model)
    sequence = tokenize_document(vocab, title, abstract, encoder.config.max_document_length)
    return _run_single(encoder, sequence)


def encode_text(model: EncoderLike, vocab: Vocabulary, text: str) -> torch.Tensor:
    """Tokenize ``text`` with the query layout and encode it."""
    encoder = query_encoder(model)
    return _run_single(encoder, tokenize(vocab, text, encoder.config.max_query_length))


def cross_score(model: CrossEncoder, q: TokenSequence, d_tokens: Sequence[int]) -> torch.Tensor:
    """Scalar ``W^T h_CLS + b`` over ``[CLS] q [SEP] d [SEP]``."""
    sequence = cross_layout(q, d_tokens, model.config.max_cross_length)
    _check_fits(model.encoder, sequence)
    device = model.head.weight.device
    input_ids = torch.tensor([sequence.ids[:sequence.length]], dtype=torch.long, device=device)
    lengths = torch.tensor([sequence.length], dtype=torch.long, device=device)
    return model(input_ids, lengths)[0]


def encode_batch(encoder: TransformerEncoder, sequences: Sequence[TokenSequence]) -> torch.Tensor:
    """Padded batch forward, shape ``(len(sequences), h)``; used by training."""
    for sequence in sequences:
        _check_fits(encoder, sequence)
    input_ids, lengths = to_batch(sequences)
    device = encoder.token_embeddings.weight.device
    return encoder(input_ids.to(device), lengths.to(device))


def cross_score_batch(model: CrossEncoder, sequences: Sequence[TokenSequence]) -> torch.Tensor:
    """Cross-encoder scores for already laid-out pair sequences."""
    input_ids, lengths = to_batch(sequences)
    device = model.head.weight.device
    return model(input_ids.to(device), lengths.to(device))


def backward(model: nn.Module, loss: torch.Tensor) -> Dict[str, torch.Tensor]:
    """
    Gradients of a scalar loss with respect to every named parameter.

    Parameters the loss does not reach get zero tensors. A constant zero
    loss with no recorded graph gives all-zero gradients; any other loss
    without a graph is a usage error. The graph is freed afterwards, so a
    second call on the same loss is a usage error too.
    """
    if loss.numel() != 1:
        raise ConfigurationError(message="backward needs a scalar loss", context={'shape': list(loss.shape)})
    if loss.grad_fn is None:
        if not loss.requires_grad and float(loss.detach().reshape(())) == 0.0:
            return {name: torch.zeros_like(param) for name, param in model.named_parameters()}
        raise BackwardWithoutForwardError(
            message="Loss has no recorded forward pass",
            context={'requires_grad': loss.requires_grad}
        )
    ensure_finite(loss.detach(), 'loss')
    model.zero_grad(set_to_none=True)
    try:
        loss.reshape(()).backward()
    except RuntimeError as e:
        raise BackwardWithoutForwardError(
            message=f"Backward failed: {e}",
            cause=e
        )
    grads: Dict[str, torch.Tensor] = {}
    for name, param in model.named_parameters():
        grads[name] = param.grad.detach().clone() if param.grad is not None else torch.zeros_like(param)
    model.zero_grad(set_to_none=True)
    return grads


def accumulate(total: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Add ``grads`` into ``total`` in parameter order."""
    if not total:
        return {name: grad.clone() for name, grad in grads.items()}
    for name, grad in grads.items():
        total[name].add_(grad)
    return total
