"""
Input validation for the JSON-lines, JSON and TSV files the pipeline exchanges.

Every parse failure is raised as an application error that names the file
and the 1-based line number.
"""
import json
import logging
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from django.conf import settings

from .exceptions import ConfigurationError, InvalidRecordError, MissingPathError, get_error_context


logger = logging.getLogger(__name__)


class InputValidator:
    """
    Validation and parsing service for pipeline input files.
    """

    @classmethod
    def validate_json_line(cls, line: str, path: Any = None, line_no: Optional[int] = None) -> Dict[str, Any]:
        """
        Validate and parse one JSON-lines record.

        Args:
            line: Raw line text
            path: File the line came from (for error context)
            line_no: 1-based line number

        Returns:
            Parsed record as a dictionary

        Raises:
            InvalidRecordError: If the line is not a JSON object or is too large
        """
        max_size = getattr(settings, 'MAX_JSONL_RECORD_BYTES', 1024 * 1024)
        if len(line.encode('utf-8')) > max_size:
            raise InvalidRecordError(
                message=f"Record too large at {path}:{line_no}",
                context=get_error_context(path=path, line=line_no, max_size=max_size)
            )
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise InvalidRecordError(
                message=f"Invalid JSON at {path}:{line_no}: {e.msg}",
                context=get_error_context(path=path, line=line_no, column=e.colno),
                cause=e
            )
        if not isinstance(data, dict):
            raise InvalidRecordError(
                message=f"Record at {path}:{line_no} must be a JSON object",
                context=get_error_context(path=path, line=line_no, type=type(data).__name__)
            )
        return data

    @classmethod
    def validate_required_fields(cls, data: Dict[str, Any], required_fields: Iterable[str],
                                 path: Any = None, line_no: Optional[int] = None) -> None:
        """
        Validate that all required fields are present in a record.

        Raises:
            InvalidRecordError: If any required fields are missing
        """
        missing_fields = [name for name in required_fields if name not in data]
        if missing_fields:
            raise InvalidRecordError(
                message=f"Missing fields {', '.join(missing_fields)} at {path}:{line_no}",
                context=get_error_context(
                    path=path, line=line_no,
                    missing_fields=missing_fields,
                    provided_fields=sorted(data.keys())
                )
            )

    @classmethod
    def require_file(cls, path: Any, stage: Optional[str] = None) -> Path:
        """Return ``path`` as a Path, raising if it does not exist."""
        path = Path(path)
        if not path.exists():
            raise MissingPathError(
                message=f"Required file not found: {path}",
                context=get_error_context(stage=stage, path=path)
            )
        return path

    @classmethod
    def read_jsonl(cls, path: Any, required_fields: Iterable[str] = ()) -> Iterator[Tuple[int, Dict[str, Any]]]:
        """
        Stream ``(line number, record)`` pairs from a JSON-lines file.

        Blank lines are skipped.
        """
        path = cls.require_file(path)
        required = list(required_fields)
        with path.open('r', encoding='utf-8') as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                record = cls.validate_json_line(line, path, line_no)
                cls.validate_required_fields(record, required, path, line_no)
                yield line_no, record

    @classmethod
    def write_jsonl(cls, path: Any, records: Iterable[Dict[str, Any]]) -> int:
        """Write records one per line with a stable key order; returns the count."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        count = 0
        with path.open('w', encoding='utf-8', newline='\n') as handle:
            for record in records:
                handle.write(json.dumps(record, ensure_ascii=False, separators=(',', ':')))
                handle.write('\n')
                count += 1
        return count

    @classmethod
    def read_json_object(cls, path: Any) -> Dict[str, Any]:
        """Read a whole-file JSON object (synonym tables, stats reports)."""
        path = cls.require_file(path)
        text = path.read_text(encoding='utf-8')
        if not text.strip():
            return {}
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise InvalidRecordError(
                message=f"Invalid JSON at {path}:{e.lineno}: {e.msg}",
                context=get_error_context(path=path, line=e.lineno, column=e.colno),
                cause=e
            )
        if not isinstance(data, dict):
            raise InvalidRecordError(message=f"{path} must hold a JSON object", context=get_error_context(path=path))
        return data

    @classmethod
    def read_tsv_pairs(cls, path: Any, columns: int = 2) -> List[Tuple[str, ...]]:
        """
        Read a tab-separated file with exactly ``columns`` fields per line.

        Used for query files (``qid<TAB>text``) and sentence-pair files.
        """
        path = cls.require_file(path)
        rows: List[Tuple[str, ...]] = []
        with path.open('r', encoding='utf-8') as handle:
            for line_no, line in enumerate(handle, start=1):
                line = line.rstrip('\n')
                if not line.strip():
                    continue
                fields = line.split('\t')
                if len(fields) != columns:
                    raise InvalidRecordError(
                        message=f"Expected {columns} tab-separated fields at {path}:{line_no}, got {len(fields)}",
                        context=get_error_context(path=path, line=line_no)
                    )
                rows.append(tuple(fields))
        return rows

    @classmethod
    def write_tsv(cls, path: Any, rows: Iterable[Sequence[Any]]) -> int:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        count = 0
        with path.open('w', encoding='utf-8', newline='\n') as handle:
            for row in rows:
                handle.write('\t'.join(str(value) for value in row) + '\n')
                count += 1
        return count


class ConfigDictMixin:
    """
    ``to_dict``/``from_dict`` for frozen config dataclasses.

    Values are cast with the type of the field default, so strings read
    from an INI file are accepted. Unknown keys are rejected.
    """

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(
                message=f"Unknown {cls.__name__} keys: {', '.join(unknown)}",
                context={'unknown': unknown}
            )
        defaults = cls()
        return cls(**{key: type(getattr(defaults, key))(value) for key, value in data.items()})
