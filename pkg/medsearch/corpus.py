"""
Article corpus: the document unit shared by every app, and its JSON-lines I/O.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Mapping

from .exceptions import DuplicateArticleError, UnresolvedArticleError, get_error_context
from .validation import InputValidator


logger = logging.getLogger(__name__)

CORPUS_FIELDS = ('id', 'title', 'abstract')


@dataclass(frozen=True)
class Article:
    """A document with id, title and abstract."""
    id: str
    title: str
    abstract: str = ''

    @property
    def text(self) -> str:
        """Title and abstract joined as the models see them."""
        if not self.abstract:
            return self.title
        return f"{self.title} {self.abstract}"

    def to_dict(self) -> Dict[str, str]:
        return {'id': self.id, 'title': self.title, 'abstract': self.abstract}


class Corpus(Mapping[str, Article]):
    """
    Ordered, id-addressable article collection.

    Iteration follows insertion order; duplicate ids are rejected.
    """

    def __init__(self, articles: Iterable[Article] = ()):
        self._articles: Dict[str, Article] = {}
        for article in articles:
            if article.id in self._articles:
                raise DuplicateArticleError(
                    message=f"Duplicate article id {article.id!r}",
                    context=get_error_context(article_id=article.id)
                )
            self._articles[article.id] = article

    def __getitem__(self, article_id: str) -> Article:
        return self._articles[article_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._articles)

    def __len__(self) -> int:
        return len(self._articles)

    def articles(self) -> List[Article]:
        return list(self._articles.values())

    def resolve(self, article_id: str, stage: str = 'corpus') -> Article:
        """Look up an article, raising an application error when absent."""
        try:
            return self._articles[article_id]
        except KeyError:
            raise UnresolvedArticleError(
                message=f"Article {article_id!r} does not resolve in the corpus",
                context=get_error_context(stage=stage, article_id=article_id)
            )


def load_corpus(path) -> Corpus:
    """Read a corpus JSON-lines file ({"id", "title", "abstract"} per line)."""
    articles = []
    seen = set()
    for line_no, record in InputValidator.read_jsonl(path, CORPUS_FIELDS):
        article_id = str(record['id'])
        if article_id in seen:
            raise DuplicateArticleError(
                message=f"Duplicate article id {article_id!r} at {path}:{line_no}",
                context=get_error_context(path=path, line=line_no, article_id=article_id)
            )
        seen.add(article_id)
        articles.append(Article(article_id, str(record['title']), str(record['abstract'] or '')))
    logger.info(f"Loaded {len(articles)} articles from {path}")
    return Corpus(articles)


def write_corpus(path, articles: Iterable[Article]) -> int:
    return InputValidator.write_jsonl(path, (article.to_dict() for article in articles))
