"""
Vocabulary and word-level tokenization.

Text is lowercased and split on anything that is not a word character; the
vocabulary keeps the most frequent tokens of a corpus behind four fixed
special tokens.
"""
import logging
import re
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

from medsearch.constants import SPECIAL_TOKENS, UNK_ID
from medsearch.corpus import Article
from medsearch.validation import InputValidator
from medsearch.exceptions import (
    ConfigurationError, EmptyCorpusError, VocabularyFormatError, get_error_context
)


logger = logging.getLogger(__name__)

WORD_PATTERN = re.compile(r"\w+")


def split_words(text: str) -> List[str]:
    """Lowercase and split on whitespace/punctuation."""
    return WORD_PATTERN.findall(text.lower())


class Vocabulary:
    """Dense token <-> id mapping with specials at ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabularyFormatError(
                message="Vocabulary must start with the special tokens",
                context={'head': list(tokens[:len(SPECIAL_TOKENS)])}
            )
        self._id_to_token: List[str] = list(tokens)
        self._token_to_id: Dict[str, int] = {}
        for index, token in enumerate(self._id_to_token):
            if token in self._token_to_id:
                raise VocabularyFormatError(
                    message=f"Token {token!r} appears twice in vocabulary",
                    context={'token': token, 'ids': [self._token_to_id[token], index]}
                )
            self._token_to_id[token] = index

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._id_to_token == other._id_to_token

    @property
    def size(self) -> int:
        return len(self._id_to_token)

    @property
    def tokens(self) -> List[str]:
        return list(self._id_to_token)

    def token_id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def ids(self, words: Iterable[str]) -> List[int]:
        return [self.token_id(word) for word in words]

    def encode_text(self, text: str) -> List[int]:
        """Word ids of ``text`` without any special tokens."""
        return self.ids(split_words(text))

    def save(self, path: Union[str, Path]) -> None:
        """One token per line; line number is the id."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(''.join(f"{token}\n" for token in self._id_to_token), encoding='utf-8')

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Vocabulary':
        path = InputValidator.require_file(path, stage='vocabulary')
        lines = path.read_text(encoding='utf-8').split('\n')
        if lines and lines[-1] == '':
            lines.pop()
        for line_no, token in enumerate(lines, start=1):
            if not token or any(ch.isspace() for ch in token):
                raise VocabularyFormatError(
                    message=f"Invalid vocabulary token at {path}:{line_no}",
                    context=get_error_context(path=path, line=line_no)
                )
        return cls(lines)


def build_vocab(corpus: Iterable[Union[Article, str]], max_size: int,
                extra_texts: Iterable[str] = ()) -> Vocabulary:
    """
    Build a frequency-ranked vocabulary.

    Tokens are ordered by descending corpus frequency, ties broken
    lexicographically, and capped so the vocabulary holds at most
    ``max_size`` entries including the specials. ``extra_texts`` (training
    queries) are counted together with the articles.
    """
    if max_size <= len(SPECIAL_TOKENS):
        raise ConfigurationError(
            message=f"Vocabulary max_size must exceed {len(SPECIAL_TOKENS)}, got {max_size}",
            context={'max_size': max_size}
        )

    counts: Counter = Counter()
    documents = 0
    for item in corpus:
        text = item.text if isinstance(item, Article) else str(item)
        counts.update(split_words(text))
        documents += 1
    if documents == 0:
        raise EmptyCorpusError(message="Cannot build a vocabulary from an empty corpus")
    for text in extra_texts:
        counts.update(split_words(text))

    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    kept = [token for token, _ in ranked[:max_size - len(SPECIAL_TOKENS)]]
    logger.info(f"Built vocabulary: {len(kept)} tokens kept of {len(ranked)} distinct from {documents} documents")
    return Vocabulary(list(SPECIAL_TOKENS) + kept)
