"""
Qrels and runs, and their TREC text formats.

    qrels:  qid 0 docid grade
    run:    qid Q0 docid rank score tag
"""
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Tuple

from medsearch.constants import RUN_TAG
from medsearch.exceptions import ConfigurationError, TrecParseError, get_error_context
from medsearch.validation import InputValidator
from retrieval.index import RankedList


logger = logging.getLogger(__name__)


class Qrels(Mapping[str, Dict[str, int]]):
    """qid -> {article id -> non-negative integer grade}."""

    def __init__(self, judgments: Mapping[str, Mapping[str, int]] = None):
        self._judgments: Dict[str, Dict[str, int]] = {}
        for qid, grades in (judgments or {}).items():
            for doc_id, grade in grades.items():
                self.add(qid, doc_id, grade)

    def add(self, qid: str, doc_id: str, grade: int) -> None:
        if isinstance(grade, bool) or not isinstance(grade, int) or grade < 0:
            raise ConfigurationError(message=f"Grade for ({qid}, {doc_id}) must be an integer >= 0",
                                     context={'qid': qid, 'doc_id': doc_id, 'grade': repr(grade)})
        self._judgments.setdefault(qid, {})[doc_id] = grade

    def __getitem__(self, qid: str) -> Dict[str, int]:
        return self._judgments[qid]

    def __iter__(self) -> Iterator[str]:
        return iter(self._judgments)

    def __len__(self) -> int:
        return len(self._judgments)

    def judged_queries(self) -> List[str]:
        """Queries with at least one positive grade, sorted."""
        return sorted(qid for qid, grades in self._judgments.items() if any(g > 0 for g in grades.values()))

    def restrict(self, prefix: str) -> 'Qrels':
        return Qrels({qid: grades for qid, grades in self._judgments.items() if qid.startswith(prefix)})


class Run(Mapping[str, RankedList]):
    """qid -> RankedList."""

    def __init__(self, lists: Iterable[RankedList] = ()):
        self._lists: Dict[str, RankedList] = {}
        for ranked in lists:
            if ranked.qid in self._lists:
                raise ConfigurationError(message=f"Run already holds query {ranked.qid}", context={'qid': ranked.qid})
            self._lists[ranked.qid] = ranked

    def __getitem__(self, qid: str) -> RankedList:
        return self._lists[qid]

    def __iter__(self) -> Iterator[str]:
        return iter(self._lists)

    def __len__(self) -> int:
        return len(self._lists)


def _parse_error(path: Any, line_no: int, what: str) -> TrecParseError:
    return TrecParseError(
        message=f"{path}:{line_no}: {what}",
        context=get_error_context(path=path, line=line_no)
    )


def load_qrels(path: Any) -> Qrels:
    path = InputValidator.require_file(path, stage='load_qrels')
    qrels = Qrels()
    with path.open('r', encoding='utf-8') as handle:
        for line_no, line in enumerate(handle, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 4:
                raise _parse_error(path, line_no, f"expected 4 fields, found {len(fields)}")
            qid, _, doc_id, grade = fields
            try:
                value = int(grade)
            except ValueError:
                raise _parse_error(path, line_no, f"grade {grade!r} is not an integer")
            if value < 0:
                raise _parse_error(path, line_no, f"grade {value} is negative")
            qrels.add(qid, doc_id, value)
    logger.info(f"Loaded qrels for {len(qrels)} queries from {path}")
    return qrels


def write_qrels(qrels: Mapping[str, Mapping[str, int]], path: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8', newline='\n') as handle:
        for qid in qrels:
            for doc_id, grade in qrels[qid].items():
                handle.write(f"{qid} 0 {doc_id} {grade}\n")
    return path


def run_lines(run: Mapping[str, RankedList], tag: str = RUN_TAG) -> Iterator[str]:
    for qid in run:
        for rank, (doc_id, score) in enumerate(run[qid].entries, start=1):
            yield f"{qid} Q0 {doc_id} {rank} {score!r} {tag}\n"


def write_run(run: Mapping[str, RankedList], path: Any, tag: str = RUN_TAG) -> Path:
    """Scores are written with ``repr`` so reading them back is exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8', newline='\n') as handle:
        handle.writelines(run_lines(run, tag))
    return path


def load_run(path: Any) -> Run:
    """
    Read a TREC run file.

    Entries are ordered by (score desc, id asc) as written by ``write_run``;
    the rank column is checked but never used for ordering. Ranks must be
    positive and distinct within a query. A query whose rank order
    disagrees with its score order is logged and re-sorted by score.
    """
    path = InputValidator.require_file(path, stage='load_run')
    rows: Dict[str, List[Tuple[int, str, float]]] = {}
    seen_ranks: Dict[str, Dict[int, int]] = {}
    with path.open('r', encoding='utf-8') as handle:
        for line_no, line in enumerate(handle, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 6:
                raise _parse_error(path, line_no, f"expected 6 fields, found {len(fields)}")
            qid, _, doc_id, rank, score, _ = fields
            try:
                entry = (int(rank), doc_id, float(score))
            except ValueError:
                raise _parse_error(path, line_no, f"bad rank {rank!r} or score {score!r}")
            if entry[0] < 1:
                raise _parse_error(path, line_no, f"rank must be >= 1, got {entry[0]}")
            ranks = seen_ranks.setdefault(qid, {})
            if entry[0] in ranks:
                raise _parse_error(path, line_no, f"rank {entry[0]} repeats line {ranks[entry[0]]} for {qid}")
            ranks[entry[0]] = line_no
            rows.setdefault(qid, []).append(entry)
    lists = []
    disordered = []
    for qid, entries in rows.items():
        by_rank = [score for _, _, score in sorted(entries)]
        if any(later > earlier for earlier, later in zip(by_rank, by_rank[1:])):
            disordered.append(qid)
        try:
            lists.append(RankedList.from_scores(qid, ((doc_id, score) for _, doc_id, score in entries)))
        except ConfigurationError as e:
            raise TrecParseError(message=f"{path}: {e.message}", context=get_error_context(path=path, qid=qid), cause=e)
    if disordered:
        logger.warning(f"{path}: rank column disagrees with scores for {len(disordered)} queries "
                       f"(first: {disordered[0]}); using score order")
    return Run(lists)
