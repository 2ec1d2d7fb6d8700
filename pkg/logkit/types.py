"""
Click-log records, generator configuration and file formats.

    log file:       {"qid", "query", "navigational": bool, "clicks": {docid: count}, "kind"?}
    synonym table:  {"term": ["synonym", ...], ...}
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

from medsearch import constants
from medsearch.exceptions import ConfigurationError, InvalidClickCountError, InvalidRecordError, get_error_context
from medsearch.validation import ConfigDictMixin, InputValidator


logger = logging.getLogger(__name__)

LOG_FIELDS = ('qid', 'query', 'navigational', 'clicks')
QUERY_KINDS = ('keyword', 'nonkeyword', 'navigational')


@dataclass(frozen=True)
class LogRecord:
    """One logged query with its clicked articles and per-article counts."""
    qid: str
    query: str
    navigational: bool = False
    clicks: Tuple[Tuple[str, int], ...] = ()
    kind: Optional[str] = None

    def __post_init__(self):
        for doc_id, count in self.clicks:
            if isinstance(count, bool) or not isinstance(count, int) or count < 1:
                raise InvalidClickCountError(
                    message=f"Click count for {doc_id} in {self.qid} must be >= 1, got {count!r}",
                    context=get_error_context(qid=self.qid, doc_id=doc_id)
                )
        if self.kind is not None and self.kind not in QUERY_KINDS:
            raise InvalidRecordError(message=f"Unknown query kind {self.kind!r}", context={'qid': self.qid})

    @property
    def clicked_ids(self) -> List[str]:
        return [doc_id for doc_id, _ in self.clicks]

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            'qid': self.qid,
            'query': self.query,
            'navigational': self.navigational,
            'clicks': dict(self.clicks),
        }
        if self.kind is not None:
            data['kind'] = self.kind
        return data


@dataclass(frozen=True)
class CorpusGenConfig(ConfigDictMixin):
    """Synthetic corpus: pseudo-term articles plus near-duplicate distractors."""
    num_articles: int = 200
    num_terms: int = 400
    background_terms: int = 300
    title_length: int = 4
    abstract_length: int = 24
    synonyms_per_term: int = 2
    distractor_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_articles < 0 or self.num_terms < 1 or self.background_terms < 0:
            raise ConfigurationError(message="Corpus sizes must be non-negative (num_terms >= 1)",
                                     context=self.to_dict())
        if self.title_length < 2 or self.abstract_length < 0 or self.synonyms_per_term < 1:
            raise ConfigurationError(
                message="title_length must be >= 2, abstract_length >= 0 and synonyms_per_term >= 1",
                context=self.to_dict()
            )
        if self.title_length > self.num_terms:
            raise ConfigurationError(message="title_length cannot exceed num_terms", context=self.to_dict())
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ConfigurationError(message="distractor_rate must lie in [0, 1]", context=self.to_dict())


@dataclass(frozen=True)
class LogGenConfig(ConfigDictMixin):
    """Query counts per class, click law and seed for the synthetic log."""
    num_keyword: int = 300
    num_nonkeyword: int = 600
    num_navigational: int = 100
    zipf_exponent: float = constants.DEFAULT_ZIPF_EXPONENT
    max_clicks: int = constants.MAX_CLICKS
    repeat_rate: float = 0.1
    heldout_queries: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ('num_keyword', 'num_nonkeyword', 'num_navigational', 'heldout_queries'):
            if getattr(self, name) < 0:
                raise ConfigurationError(message=f"{name} must be >= 0", context={name: getattr(self, name)})
        if self.zipf_exponent <= 0:
            raise ConfigurationError(message="Zipf exponent must be > 0", context={'zipf_exponent': self.zipf_exponent})
        if self.max_clicks < 1 or not 0.0 <= self.repeat_rate < 1.0:
            raise ConfigurationError(message="max_clicks must be >= 1 and repeat_rate in [0, 1)",
                                     context={'max_clicks': self.max_clicks, 'repeat_rate': self.repeat_rate})

    @property
    def total(self) -> int:
        return self.num_keyword + self.num_nonkeyword + self.num_navigational


def _record_from_dict(record: Dict[str, Any], path: Any, line_no: int) -> LogRecord:
    clicks = record['clicks']
    if not isinstance(clicks, dict) or not isinstance(record['navigational'], bool):
        raise InvalidRecordError(
            message=f"'clicks' must be an object and 'navigational' a boolean at {path}:{line_no}",
            context=get_error_context(path=path, line=line_no)
        )
    try:
        return LogRecord(
            qid=str(record['qid']),
            query=str(record['query']),
            navigational=record['navigational'],
            clicks=tuple((str(doc_id), count) for doc_id, count in clicks.items()),
            kind=record.get('kind'),
        )
    except InvalidClickCountError as e:
        raise InvalidClickCountError(
            message=f"{e.message} at {path}:{line_no}",
            context=get_error_context(path=path, line=line_no, **e.context),
            cause=e
        )


def read_logs(path: Any) -> List[LogRecord]:
    records = [_record_from_dict(record, path, line_no)
               for line_no, record in InputValidator.read_jsonl(path, LOG_FIELDS)]
    logger.info(f"Read {len(records)} log records from {path}")
    return records


def write_logs(path: Any, records: Iterable[LogRecord]) -> int:
    return InputValidator.write_jsonl(path, (record.to_dict() for record in records))


def read_synonyms(path: Any) -> Dict[str, List[str]]:
    table = InputValidator.read_json_object(path)
    for term, synonyms in table.items():
        if not isinstance(synonyms, list) or not all(isinstance(s, str) for s in synonyms):
            raise InvalidRecordError(
                message=f"Synonyms of {term!r} in {path} must be a list of strings",
                context=get_error_context(path=path, term=term)
            )
    return table


def write_synonyms(path: Any, table: Dict[str, List[str]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(table, ensure_ascii=False, sort_keys=True, indent=1) + '\n', encoding='utf-8')
    return path
