"""
Synthetic corpus, click-log and held-out benchmark generation.

Articles are built from pronounceable pseudo-terms. Every title term has
synonyms that never occur in any article, so a query made only of synonyms
has zero lexical overlap with the article it was derived from. Keyword
queries are verbatim title spans and always satisfy the keyword rule;
non-keyword queries are fully synonym-substituted title spans and never do.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from medsearch.corpus import Article, Corpus
from medsearch.exceptions import EmptyCorpusError, SynonymMissingError, get_error_context
from medsearch.monitoring import StageTimer

from .types import CorpusGenConfig, LogGenConfig, LogRecord


logger = logging.getLogger(__name__)

CONSONANTS = 'bcdfghklmnprstvz'
VOWELS = 'aeiou'
DISTRACTOR_SUFFIX = '-nd'


def is_distractor(article_id: str) -> bool:
    return article_id.endswith(DISTRACTOR_SUFFIX)


class PseudoWords:
    """Draws distinct consonant-vowel pseudo-words from a seeded generator."""

    def __init__(self, rng: np.random.Generator, syllables: int = 3):
        self.rng = rng
        self.syllables = syllables
        self.used: Set[str] = set()

    def draw(self) -> str:
        while True:
            word = ''.join(
                CONSONANTS[self.rng.integers(len(CONSONANTS))] + VOWELS[self.rng.integers(len(VOWELS))]
                for _ in range(self.syllables)
            )
            if word not in self.used:
                self.used.add(word)
                return word

    def draw_many(self, count: int) -> List[str]:
        return [self.draw() for _ in range(count)]


@dataclass
class GeneratedCorpus:
    articles: List[Article]
    synonyms: Dict[str, List[str]]
    distractors: Dict[str, str] = field(default_factory=dict)


def generate_corpus(cfg: CorpusGenConfig) -> GeneratedCorpus:
    """
    Articles ``A000000..`` with titles of ``title_length`` distinct terms and
    abstracts mixing the title terms with other terms and background words.
    A ``distractor_rate`` share of articles gets a near-duplicate
    ``<id>-nd`` with one title term swapped throughout.
    """
    rng = np.random.default_rng(cfg.seed)
    words = PseudoWords(rng)
    terms = words.draw_many(cfg.num_terms)
    background = words.draw_many(cfg.background_terms)
    synonyms = {term: words.draw_many(cfg.synonyms_per_term) for term in terms}

    articles: List[Article] = []
    distractors: Dict[str, str] = {}
    filler_pool = terms + background
    for index in range(cfg.num_articles):
        title_terms = [terms[i] for i in rng.choice(cfg.num_terms, size=cfg.title_length, replace=False)]
        filler_count = max(0, cfg.abstract_length - len(title_terms))
        filler = [filler_pool[i] for i in rng.integers(len(filler_pool), size=filler_count)]
        body = title_terms + filler
        body = [body[i] for i in rng.permutation(len(body))] if cfg.abstract_length else []
        article = Article(
            id=f"A{index:06d}",
            title=' '.join(title_terms).capitalize(),
            abstract=(' '.join(body).capitalize() + '.') if body else '',
        )
        articles.append(article)

        if cfg.distractor_rate and rng.random() < cfg.distractor_rate:
            position = int(rng.integers(len(title_terms)))
            original = title_terms[position]
            replacement = original
            while replacement in title_terms:
                replacement = terms[int(rng.integers(cfg.num_terms))]
            swapped_title = [replacement if w == original else w for w in title_terms]
            swapped_body = [replacement if w == original else w for w in body]
            twin = Article(
                id=article.id + DISTRACTOR_SUFFIX,
                title=' '.join(swapped_title).capitalize(),
                abstract=(' '.join(swapped_body).capitalize() + '.') if swapped_body else '',
            )
            articles.append(twin)
            distractors[article.id] = twin.id

    logger.info(f"Generated {len(articles)} articles ({len(distractors)} distractors) over {len(terms)} terms")
    return GeneratedCorpus(articles, synonyms, distractors)


def draw_clicks(rng: np.random.Generator, exponent: float, max_clicks: int) -> int:
    """Zipf(exponent) truncated to ``[1, max_clicks]`` by rejection."""
    while True:
        clicks = int(rng.zipf(exponent)) if exponent > 1 else int(np.floor(rng.pareto(exponent))) + 1
        if clicks <= max_clicks:
            return clicks


def title_words(article: Article) -> List[str]:
    return article.title.lower().split()


def substitute(words: Sequence[str], synonyms: Dict[str, List[str]], rng: np.random.Generator,
               qid: str = '') -> List[str]:
    """Replace every word with one of its synonyms."""
    missing = sorted({word for word in words if not synonyms.get(word)})
    if missing:
        raise SynonymMissingError(
            message=f"Synonym table has no entry for: {', '.join(missing)}",
            context=get_error_context(stage='gen_logs', qid=qid, terms=missing)
        )
    return [synonyms[word][int(rng.integers(len(synonyms[word])))] for word in words]


class LogGenerator:
    """Seeded synthetic click-log generator over a fixed corpus."""

    # Shortest title each query kind can be drawn from.
    MIN_TITLE_WORDS = {'keyword': 1, 'nonkeyword': 2, 'navigational': 0}

    def __init__(self, corpus: Corpus, synonyms: Dict[str, List[str]], cfg: LogGenConfig,
                 exclude: Iterable[str] = ()):
        excluded = set(exclude)
        self.articles = [article for article in corpus.articles() if article.id not in excluded]
        if cfg.total and not self.articles:
            raise EmptyCorpusError(message="Log generation needs a non-empty corpus")
        self.pools = {
            kind: [article for article in self.articles if len(title_words(article)) >= shortest]
            for kind, shortest in self.MIN_TITLE_WORDS.items()
        }
        for kind, pool in self.pools.items():
            if getattr(cfg, f"num_{kind}") and not pool:
                raise EmptyCorpusError(
                    message=f"No article title is long enough for {kind} queries "
                            f"(needs {self.MIN_TITLE_WORDS[kind]} words)",
                    context=get_error_context(stage='gen_logs', kind=kind, articles=len(self.articles))
                )
        skipped = len(self.articles) - len(self.pools['nonkeyword'])
        if skipped:
            logger.info(f"{skipped} articles have titles too short for non-keyword queries")
        self.synonyms = synonyms
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.names = PseudoWords(np.random.default_rng([cfg.seed, 1]), syllables=2)

    def _article(self, kind: str) -> Article:
        pool = self.pools[kind]
        return pool[int(self.rng.integers(len(pool)))]

    def _span(self, words: List[str], min_length: int) -> List[str]:
        length = int(self.rng.integers(min_length, len(words) + 1))
        start = int(self.rng.integers(len(words) - length + 1))
        return words[start:start + length]

    def _query(self, kind: str, qid: str) -> Tuple[str, Article]:
        article = self._article(kind)
        words = title_words(article)
        if kind == 'keyword':
            min_length = 1 if self.rng.random() < 0.4 else min(2, len(words))
            return ' '.join(self._span(words, min_length)), article
        if kind == 'nonkeyword':
            return ' '.join(substitute(self._span(words, 2), self.synonyms, self.rng, qid)), article
        surname = self.names.draw()
        initial = CONSONANTS[int(self.rng.integers(len(CONSONANTS)))]
        return f"{surname} {initial}", article

    def generate(self) -> List[LogRecord]:
        cfg = self.cfg
        kinds = ['keyword'] * cfg.num_keyword + ['nonkeyword'] * cfg.num_nonkeyword \
            + ['navigational'] * cfg.num_navigational
        kinds = [kinds[i] for i in self.rng.permutation(len(kinds))]
        records: List[LogRecord] = []
        earlier: Dict[str, List[LogRecord]] = {'keyword': [], 'nonkeyword': []}
        next_qid = 1
        with StageTimer('gen_logs') as timer:
            for kind in kinds:
                clicks = draw_clicks(self.rng, cfg.zipf_exponent, cfg.max_clicks)
                previous = earlier.get(kind)
                if previous and self.rng.random() < cfg.repeat_rate:
                    source = previous[int(self.rng.integers(len(previous)))]
                    record = LogRecord(source.qid, source.query, False,
                                       ((source.clicked_ids[0], clicks),), kind)
                else:
                    qid = f"q{next_qid:06d}"
                    next_qid += 1
                    query, article = self._query(kind, qid)
                    record = LogRecord(qid, query, kind == 'navigational', ((article.id, clicks),), kind)
                    if previous is not None:
                        previous.append(record)
                records.append(record)
            timer.counts.update({kind: kinds.count(kind) for kind in ('keyword', 'nonkeyword', 'navigational')})
        return records


def generate_logs(corpus: Corpus, synonyms: Dict[str, List[str]], cfg: LogGenConfig,
                  exclude: Iterable[str] = ()) -> List[LogRecord]:
    """Synthetic log records in generation order; ``exclude`` ids are never clicked."""
    return LogGenerator(corpus, synonyms, cfg, exclude).generate()


@dataclass
class Benchmark:
    queries: List[Tuple[str, str]]
    qrels: Dict[str, Dict[str, int]]
    source_ids: List[str]

    @property
    def excluded_ids(self) -> Set[str]:
        """Sources and their distractors; kept out of the training log."""
        return set(self.source_ids) | {article_id + DISTRACTOR_SUFFIX for article_id in self.source_ids}


def generate_benchmark(corpus: Corpus, synonyms: Dict[str, List[str]], num_queries: int,
                       seed: int, exclude: Optional[Iterable[str]] = None) -> Benchmark:
    """
    Held-out non-keyword queries: each is the fully synonym-substituted title
    of a distinct source article, which is its single relevant document
    (grade 1). Sources with a near-duplicate in the corpus get qids ``hd*``,
    the rest ``hq*``.
    """
    excluded = set(exclude or ())
    candidates = [a for a in corpus.articles()
                  if not is_distractor(a.id) and a.id not in excluded and title_words(a)]
    if num_queries and not candidates:
        raise EmptyCorpusError(message="No articles available for held-out queries")
    rng = np.random.default_rng(seed)
    count = min(num_queries, len(candidates))
    chosen = sorted(rng.choice(len(candidates), size=count, replace=False).tolist()) if count else []
    queries: List[Tuple[str, str]] = []
    qrels: Dict[str, Dict[str, int]] = {}
    sources: List[str] = []
    for number, position in enumerate(chosen, start=1):
        article = candidates[position]
        prefix = 'hd' if (article.id + DISTRACTOR_SUFFIX) in corpus else 'hq'
        qid = f"{prefix}{number:05d}"
        text = ' '.join(substitute(title_words(article), synonyms, rng, qid))
        queries.append((qid, text))
        qrels[qid] = {article.id: 1}
        sources.append(article.id)
    if count < num_queries:
        logger.warning(f"Only {count} held-out queries generated of {num_queries} requested")
    return Benchmark(queries, qrels, sources)
