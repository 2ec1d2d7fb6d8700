"""
Input layouts for the three encoder modes.

    query:          [CLS] q [SEP] PAD...
    document:       [CLS] title [SEP] abstract [SEP] PAD...
    cross-encoder:  [CLS] q [SEP] d [SEP] PAD...
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch

from medsearch.constants import CLS_ID, PAD_ID, SEP_ID
from medsearch.exceptions import ConfigurationError

from .vocab import Vocabulary, split_words


MIN_SEQUENCE_LENGTH = 3


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus the number of real (non-PAD) tokens at the front."""
    ids: Tuple[int, ...]
    length: int

    def __post_init__(self):
        if not 2 <= self.length <= len(self.ids):
            raise ConfigurationError(
                message=f"Sequence length {self.length} outside [2, {len(self.ids)}]",
                context={'length': self.length, 'ids': len(self.ids)}
            )
        if self.ids[0] != CLS_ID or self.ids[self.length - 1] != SEP_ID:
            raise ConfigurationError(
                message="Sequence must start with CLS and end its real part with SEP",
                context={'first': self.ids[0], 'last': self.ids[self.length - 1]}
            )
        if any(token != PAD_ID for token in self.ids[self.length:]):
            raise ConfigurationError(message="Padded region must be all PAD")

    @property
    def content_ids(self) -> Tuple[int, ...]:
        """Ids between the leading CLS and the final SEP."""
        return self.ids[1:self.length - 1]

    def padded(self, extra: int) -> 'TokenSequence':
        return TokenSequence(self.ids + (PAD_ID,) * extra, self.length)


def _check_max_len(max_len: int) -> None:
    if max_len < MIN_SEQUENCE_LENGTH:
        raise ConfigurationError(
            message=f"max_len must be at least {MIN_SEQUENCE_LENGTH}, got {max_len}",
            context={'max_len': max_len}
        )


def _finish(ids: List[int], max_len: int) -> TokenSequence:
    length = len(ids)
    return TokenSequence(tuple(ids + [PAD_ID] * (max_len - length)), length)


def tokenize(vocab: Vocabulary, text: str, max_len: int) -> TokenSequence:
    """[CLS] + words + [SEP], truncated then padded to ``max_len``."""
    _check_max_len(max_len)
    words = vocab.ids(split_words(text))[:max_len - 2]
    return _finish([CLS_ID] + words + [SEP_ID], max_len)


def tokenize_document(vocab: Vocabulary, title: str, abstract: str, max_len: int) -> TokenSequence:
    """
    Document layout. The abstract is truncated before the title and the
    final SEP is always kept.
    """
    _check_max_len(max_len)
    budget = max_len - 3
    title_ids = vocab.ids(split_words(title))[:budget]
    abstract_ids = vocab.ids(split_words(abstract))[:budget - len(title_ids)]
    return _finish([CLS_ID] + title_ids + [SEP_ID] + abstract_ids + [SEP_ID], max_len)


def document_token_ids(vocab: Vocabulary, title: str, abstract: str) -> List[int]:
    """Word ids of a document as the cross-encoder reads it (title then abstract)."""
    return vocab.ids(split_words(title)) + vocab.ids(split_words(abstract))


def cross_layout(query: TokenSequence, d_tokens: Sequence[int], max_len: int) -> TokenSequence:
    """
    Concatenate a tokenized query and document word ids. The document tail
    is truncated first; the query is cut only if it alone overflows.
    """
    _check_max_len(max_len)
    budget = max_len - 3
    query_ids = list(query.content_ids)[:budget]
    doc_ids = list(d_tokens)[:budget - len(query_ids)]
    return _finish([CLS_ID] + query_ids + [SEP_ID] + doc_ids + [SEP_ID], max_len)


def to_batch(sequences: Sequence[TokenSequence]) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Stack sequences into ``(input_ids, lengths)`` tensors, trimmed to the
    longest real length in the batch.
    """
    if not sequences:
        raise ConfigurationError(message="Cannot batch zero sequences")
    width = max(seq.length for seq in sequences)
    rows = [list(seq.ids[:width]) + [PAD_ID] * max(0, width - len(seq.ids)) for seq in sequences]
    input_ids = torch.tensor(rows, dtype=torch.long)
    lengths = torch.tensor([seq.length for seq in sequences], dtype=torch.long)
    return input_ids, lengths
