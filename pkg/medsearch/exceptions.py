"""
Standardized exception hierarchy for the medsearch retrieval engine.

Every application error carries an error code, a short user-facing message,
structured context and an exit code. Management commands turn these errors
into process exit statuses (1 usage, 2 data/format, 3 numeric failure).
"""
from typing import Any, Dict, Optional
import logging


logger = logging.getLogger(__name__)


EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class BaseApplicationError(Exception):
    """
    Base exception class for all application-specific errors.

    Provides common error handling functionality including error codes,
    user-friendly messages, and logging integration.
    """

    # Default error properties
    error_code: str = "UNKNOWN_ERROR"
    user_message: str = "An unexpected error occurred"
    log_level: int = logging.ERROR
    exit_code: int = EXIT_DATA

    def __init__(
        self,
        message: Optional[str] = None,
        error_code: Optional[str] = None,
        user_message: Optional[str] = None,
        context: Optional[Dict[str, Any]] = None,
        cause: Optional[Exception] = None
    ):
        """
        Initialize base application error.

        Args:
            message: Technical error message for logging
            error_code: Unique error identifier
            user_message: User-friendly error message
            context: Additional context data (stage, file, line, ...)
            cause: Original exception that caused this error
        """
        self.message = message or self.user_message
        self.error_code = error_code or self.error_code
        self.user_message = user_message or self.user_message
        self.context = context or {}
        self.cause = cause

        super().__init__(self.message)

        self._log_error()

    def _log_error(self) -> None:
        """Log the error with appropriate level and context."""
        log_data = {
            'error_code': self.error_code,
            'error_context': self.context,
            'cause': str(self.cause) if self.cause else None
        }

        logger.log(
            self.log_level,
            f"[{self.error_code}] {self.message}",
            extra=log_data
        )

    def to_dict(self) -> Dict[str, Any]:
        """Convert error to a dictionary for reports."""
        return {
            'error_code': self.error_code,
            'message': self.user_message,
            'details': self.context if self.context else None
        }

    def location(self) -> str:
        """Render the file/line part of the context, if any."""
        path = self.context.get('path')
        line = self.context.get('line')
        if path and line:
            return f"{path}:{line}"
        return str(path or '')


class UsageErrorMixin:
    """Mixin for caller mistakes (bad arguments, wrong call order)."""
    exit_code = EXIT_USAGE
    log_level = logging.WARNING


class DataErrorMixin:
    """Mixin for malformed or inconsistent input data."""
    exit_code = EXIT_DATA
    log_level = logging.WARNING


class NumericErrorMixin:
    """Mixin for non-finite values and other numeric breakdowns."""
    exit_code = EXIT_NUMERIC
    log_level = logging.ERROR


# =============================================================================
# CONFIGURATION EXCEPTIONS
# =============================================================================

class ConfigurationError(UsageErrorMixin, BaseApplicationError):
    """Error when an experiment or component configuration is invalid."""
    error_code = "INVALID_CONFIGURATION"
    user_message = "Configuration is invalid"


class MissingPathError(UsageErrorMixin, BaseApplicationError):
    """Error when a path required by a command does not exist."""
    error_code = "PATH_NOT_FOUND"
    user_message = "Required file is missing"


# =============================================================================
# ENCODER EXCEPTIONS
# =============================================================================

class EncoderError(BaseApplicationError):
    """Base class for encoder-related errors."""
    error_code = "ENCODER_ERROR"
    user_message = "Encoder operation failed"


class EmptyCorpusError(DataErrorMixin, EncoderError):
    """Error when an operation needs at least one article and got none."""
    error_code = "EMPTY_CORPUS"
    user_message = "Corpus is empty"


class VocabularyFormatError(DataErrorMixin, EncoderError):
    """Error when a vocabulary file is malformed."""
    error_code = "VOCABULARY_FORMAT"
    user_message = "Vocabulary file is malformed"


class NumericFailureError(NumericErrorMixin, EncoderError):
    """Error when an activation, score or loss stops being finite."""
    error_code = "NUMERIC_FAILURE"
    user_message = "Non-finite value encountered"


class BackwardWithoutForwardError(UsageErrorMixin, EncoderError):
    """Error when gradients are requested for a value with no recorded graph."""
    error_code = "BACKWARD_WITHOUT_FORWARD"
    user_message = "No forward pass recorded for backward"


class ShapeMismatchError(UsageErrorMixin, EncoderError):
    """Error when tensors handed to the optimizer do not match parameters."""
    error_code = "SHAPE_MISMATCH"
    user_message = "Tensor shapes do not match"


class CheckpointFormatError(DataErrorMixin, EncoderError):
    """Error when a checkpoint file fails header or length validation."""
    error_code = "CHECKPOINT_FORMAT"
    user_message = "Checkpoint file is invalid"


# =============================================================================
# TRAINING EXCEPTIONS
# =============================================================================

class TrainingError(BaseApplicationError):
    """Base class for training-related errors."""
    error_code = "TRAINING_ERROR"
    user_message = "Training failed"


class InvalidClickCountError(DataErrorMixin, TrainingError):
    """Error when a click count is below one."""
    error_code = "INVALID_CLICK_COUNT"
    user_message = "Click counts must be at least 1"


class InsufficientBatchError(UsageErrorMixin, TrainingError):
    """Error when a batch is too small to provide in-batch negatives."""
    error_code = "INSUFFICIENT_BATCH"
    user_message = "Batch needs at least two instances"


class UnresolvedArticleError(DataErrorMixin, TrainingError):
    """Error when an article id does not resolve in the corpus."""
    error_code = "UNRESOLVED_ARTICLE"
    user_message = "Article id not found in corpus"


class EmptyNegativesError(UsageErrorMixin, TrainingError):
    """Error when a re-ranker instance has no negatives."""
    error_code = "EMPTY_NEGATIVES"
    user_message = "At least one negative score is required"


# =============================================================================
# INDEX EXCEPTIONS
# =============================================================================

class IndexPipelineError(BaseApplicationError):
    """Base class for index pipeline errors."""
    error_code = "INDEX_ERROR"
    user_message = "Index operation failed"


class DuplicateArticleError(DataErrorMixin, IndexPipelineError):
    """Error when the same article id appears twice in a corpus."""
    error_code = "DUPLICATE_ARTICLE"
    user_message = "Duplicate article id"


class DimensionMismatchError(UsageErrorMixin, IndexPipelineError):
    """Error when a query vector does not match the index dimension."""
    error_code = "DIMENSION_MISMATCH"
    user_message = "Vector dimension does not match the index"


class IndexFormatError(DataErrorMixin, IndexPipelineError):
    """Error when an index file is malformed or truncated."""
    error_code = "INDEX_FORMAT"
    user_message = "Index file is invalid"


# =============================================================================
# LOG CURATION EXCEPTIONS
# =============================================================================

class LogCurationError(BaseApplicationError):
    """Base class for click-log errors."""
    error_code = "LOG_CURATION_ERROR"
    user_message = "Log processing failed"


class SynonymMissingError(DataErrorMixin, LogCurationError):
    """Error when the synonym table lacks terms needed for generation."""
    error_code = "SYNONYM_MISSING"
    user_message = "Synonym table is missing required terms"


class InvalidRecordError(DataErrorMixin, LogCurationError):
    """Error when a JSON-lines record is malformed."""
    error_code = "INVALID_RECORD"
    user_message = "Input record is invalid"


# =============================================================================
# EVALUATION EXCEPTIONS
# =============================================================================

class EvaluationError(BaseApplicationError):
    """Base class for evaluation errors."""
    error_code = "EVALUATION_ERROR"
    user_message = "Evaluation failed"


class EmptyQrelsError(DataErrorMixin, EvaluationError):
    """Error when no query has a positive judgment."""
    error_code = "EMPTY_QRELS"
    user_message = "No relevance judgments to evaluate against"


class UndefinedCorrelationError(DataErrorMixin, EvaluationError):
    """Error when a correlation is requested for a constant vector."""
    error_code = "UNDEFINED_CORRELATION"
    user_message = "Correlation is undefined for zero-variance input"


class TrecParseError(DataErrorMixin, EvaluationError):
    """Error when a qrels or run line cannot be parsed."""
    error_code = "TREC_PARSE_ERROR"
    user_message = "TREC file line is malformed"


class ScalingSizeError(UsageErrorMixin, EvaluationError):
    """Error when scaling-curve sizes are invalid."""
    error_code = "INVALID_SCALING_SIZES"
    user_message = "Scaling sizes are invalid"


# =============================================================================
# UTILITY FUNCTIONS
# =============================================================================

def get_error_context(stage: Optional[str] = None, path: Any = None,
                      line: Optional[int] = None, **extra: Any) -> Dict[str, Any]:
    """
    Get standardized error context for logging.

    Args:
        stage: Pipeline stage name (command or operation)
        path: File being processed
        line: 1-based line number within ``path``

    Returns:
        Dictionary with error context
    """
    context: Dict[str, Any] = {}
    if stage:
        context['stage'] = stage
    if path is not None:
        context['path'] = str(path)
    if line is not None:
        context['line'] = line
    context.update(extra)
    return context
