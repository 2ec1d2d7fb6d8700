"""
Experiment configuration.

An experiment is described by one INI file whose sections mirror the
sub-configurations. Values are layered as

    built-in defaults < settings (environment) < config file < command-line flags

and every derived seed comes from the single ``[experiment] seed`` through
:func:`medsearch.seeding.derive_seed` unless a section sets its own.
"""
import configparser
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from django.conf import settings

from encoder.network import EncoderConfig
from evalkit.bm25 import Bm25Config
from logkit.types import CorpusGenConfig, LogGenConfig
from training.types import RerankTrainConfig, RetrieverTrainConfig

from . import constants
from .exceptions import ConfigurationError, get_error_context
from .seeding import derive_seed


logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG_NAME = 'effective_config.ini'

# Artifact file names inside the output directory
ARTIFACTS = {
    'corpus': 'corpus.jsonl',
    'synonyms': 'synonyms.json',
    'logs': 'logs.jsonl',
    'queries': 'heldout_queries.tsv',
    'qrels': 'heldout.qrels',
    'vocab': 'vocab.txt',
    'retriever_pairs': 'retriever_pairs.jsonl',
    'reranker_pairs': 'reranker_pairs.jsonl',
    'curation_stats': 'curation_stats.json',
    'retriever': 'retriever.mckp',
    'retriever_loss': 'retriever_loss.csv',
    'index': 'corpus.medv',
    'index_work': 'encode_chunks',
    'instances': 'rerank_instances.jsonl',
    'reranker': 'reranker.mckp',
    'reranker_loss': 'reranker_loss.csv',
    'run': 'run.trec',
    'reranked_run': 'reranked.trec',
    'metrics': 'metrics.csv',
    'scaling_curve': 'scaling_curve.csv',
}

# Paths the [paths] section may point elsewhere
CONFIGURABLE_PATHS = ('corpus', 'synonyms', 'logs', 'queries', 'qrels', 'vocab')

SECTIONS = ('paths', 'corpus', 'logs', 'encoder', 'retriever', 'reranker', 'bm25', 'pipeline', 'experiment')
PIPELINE_KEYS = ('top_k', 'encode_chunk_size')
EXPERIMENT_KEYS = ('seed', 'threads', 'eval_ks')


def _parse_int(value: Any, section: str, key: str) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigurationError(
            message=f"[{section}] {key} must be an integer, got {value!r}",
            context={'section': section, 'key': key}
        )


def _parse_ks(value: Any) -> Tuple[int, ...]:
    if isinstance(value, (tuple, list)):
        items = list(value)
    else:
        items = [item.strip() for item in str(value).split(',') if item.strip()]
    ks = tuple(_parse_int(item, 'experiment', 'eval_ks') for item in items)
    if not ks or any(k < 1 for k in ks):
        raise ConfigurationError(message="eval_ks must list positive integers", context={'eval_ks': str(value)})
    return ks


@dataclass
class ExperimentConfig:
    """Effective configuration of one experiment run."""
    out_dir: Path
    seed: int = constants.DEFAULT_SEED
    threads: int = 1
    eval_ks: Tuple[int, ...] = constants.DEFAULT_EVAL_KS
    top_k: int = constants.DEFAULT_TOP_K
    encode_chunk_size: int = constants.DEFAULT_ENCODE_CHUNK_SIZE
    paths: Dict[str, Path] = field(default_factory=dict)
    sections: Dict[str, Dict[str, str]] = field(default_factory=dict)
    source: Optional[Path] = None

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigurationError(message=f"threads must be >= 1, got {self.threads}", context={'threads': self.threads})
        if self.top_k < 1 or self.encode_chunk_size < 1:
            raise ConfigurationError(
                message="top_k and encode_chunk_size must be >= 1",
                context={'top_k': self.top_k, 'encode_chunk_size': self.encode_chunk_size}
            )

    # -- paths ---------------------------------------------------------------

    def path(self, name: str) -> Path:
        """Configured location of an input, else its default under ``out_dir``."""
        if name in self.paths:
            return self.paths[name]
        if name not in ARTIFACTS:
            raise ConfigurationError(message=f"Unknown artifact {name!r}", context={'artifact': name})
        return self.out_dir / ARTIFACTS[name]

    # -- sub-configurations ----------------------------------------------------

    def _with_seed(self, section: str, *names: str) -> Dict[str, str]:
        values = dict(self.sections.get(section, {}))
        values.setdefault('seed', str(derive_seed(self.seed, *names)))
        return values

    def _build(self, cls, section: str, *names: str):
        try:
            return cls.from_dict(self._with_seed(section, *names))
        except ValueError as e:
            raise ConfigurationError(
                message=f"Invalid value in [{section}]: {e}",
                context={'section': section},
                cause=e
            )

    def encoder_config(self, kind: str, vocab_size: Optional[int] = None) -> EncoderConfig:
        """
        Encoder shape from ``[encoder]``; the init seed differs per model kind.
        With ``vocab_size`` the embedding table is sized to the built
        vocabulary, which may not exceed the configured maximum.
        """
        values = dict(self.sections.get('encoder', {}))
        seed = values.pop('seed', None)
        values['seed'] = str(derive_seed(_parse_int(seed, 'encoder', 'seed') if seed is not None else self.seed, kind, 'init'))
        try:
            config = EncoderConfig.from_dict(values)
        except ValueError as e:
            raise ConfigurationError(message=f"Invalid value in [encoder]: {e}", context={'section': 'encoder'}, cause=e)
        if vocab_size is None:
            return config
        if vocab_size > config.vocab_size:
            raise ConfigurationError(
                message=f"Vocabulary holds {vocab_size} tokens but [encoder] vocab_size is {config.vocab_size}",
                context={'vocab_size': vocab_size, 'configured': config.vocab_size}
            )
        return replace(config, vocab_size=vocab_size)

    def retriever_config(self) -> RetrieverTrainConfig:
        return self._build(RetrieverTrainConfig, 'retriever', 'retriever', 'batches')

    def reranker_config(self) -> RerankTrainConfig:
        return self._build(RerankTrainConfig, 'reranker', 'reranker', 'batches')

    def corpus_config(self) -> CorpusGenConfig:
        return self._build(CorpusGenConfig, 'corpus', 'gen_corpus')

    def logs_config(self) -> LogGenConfig:
        return self._build(LogGenConfig, 'logs', 'gen_logs')

    def bm25_config(self) -> Bm25Config:
        values = self.sections.get('bm25', {})
        unknown = sorted(set(values) - {'k1', 'b'})
        if unknown:
            raise ConfigurationError(message=f"Unknown [bm25] keys: {', '.join(unknown)}", context={'unknown': unknown})
        try:
            return Bm25Config(**{key: float(value) for key, value in values.items()})
        except ValueError as e:
            raise ConfigurationError(message=f"Invalid value in [bm25]: {e}", context={'section': 'bm25'}, cause=e)

    def component_seed(self, *names: str) -> int:
        return derive_seed(self.seed, *names)

    # -- provenance ------------------------------------------------------------

    def effective(self) -> configparser.ConfigParser:
        parser = configparser.ConfigParser(interpolation=None)
        parser['paths'] = {'out_dir': str(self.out_dir)}
        parser['paths'].update({name: str(self.path(name)) for name in CONFIGURABLE_PATHS})
        parser['experiment'] = {
            'seed': str(self.seed),
            'threads': str(self.threads),
            'eval_ks': ','.join(str(k) for k in self.eval_ks),
        }
        parser['pipeline'] = {'top_k': str(self.top_k), 'encode_chunk_size': str(self.encode_chunk_size)}
        parser['encoder'] = {key: str(value) for key, value in self.encoder_config('retriever').to_dict().items()
                             if key != 'seed'}
        for section, config in (('retriever', self.retriever_config()), ('reranker', self.reranker_config()),
                                ('corpus', self.corpus_config()), ('logs', self.logs_config())):
            parser[section] = {key: str(value) for key, value in config.to_dict().items()}
        bm25 = self.bm25_config()
        parser['bm25'] = {'k1': str(bm25.k1), 'b': str(bm25.b)}
        return parser

    def write_effective(self, directory: Optional[Path] = None) -> Path:
        directory = Path(directory or self.out_dir)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / EFFECTIVE_CONFIG_NAME
        with path.open('w', encoding='utf-8', newline='\n') as handle:
            self.effective().write(handle)
        return path


def _read_file(path: Path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    if not path.exists():
        raise ConfigurationError(message=f"Config file not found: {path}", context=get_error_context(path=path))
    try:
        with path.open('r', encoding='utf-8') as handle:
            parser.read_file(handle)
    except configparser.Error as e:
        raise ConfigurationError(message=f"Cannot parse config file {path}: {e}",
                                 context=get_error_context(path=path), cause=e)
    unknown = sorted(set(parser.sections()) - set(SECTIONS))
    if unknown:
        raise ConfigurationError(message=f"Unknown config sections: {', '.join(unknown)}",
                                 context=get_error_context(path=path, sections=unknown))
    return parser


def load_experiment(path: Optional[Any] = None, seed: Optional[int] = None, threads: Optional[int] = None,
                    out_dir: Optional[Any] = None,
                    overrides: Optional[Mapping[str, Mapping[str, Any]]] = None) -> ExperimentConfig:
    """
    Build the effective configuration.

    Args:
        path: INI file, optional
        seed, threads, out_dir: command-line values (None when not given)
        overrides: section -> key -> value from command-line flags
    """
    sections: Dict[str, Dict[str, str]] = {name: {} for name in SECTIONS}
    base_dir = Path.cwd()
    source = None
    if path:
        source = Path(path)
        base_dir = source.resolve().parent
        parser = _read_file(source)
        for name in parser.sections():
            sections[name].update(parser[name])
    for section, values in (overrides or {}).items():
        if section not in sections:
            raise ConfigurationError(message=f"Unknown config section {section!r}", context={'section': section})
        sections[section].update({key: str(value) for key, value in values.items() if value is not None})

    experiment = sections.pop('experiment')
    pipeline = sections.pop('pipeline')
    paths_section = sections.pop('paths')
    for name, keys in (('experiment', EXPERIMENT_KEYS), ('pipeline', PIPELINE_KEYS),
                       ('paths', CONFIGURABLE_PATHS + ('out_dir',))):
        values = {'experiment': experiment, 'pipeline': pipeline, 'paths': paths_section}[name]
        unknown = sorted(set(values) - set(keys))
        if unknown:
            raise ConfigurationError(message=f"Unknown [{name}] keys: {', '.join(unknown)}",
                                     context={'section': name, 'unknown': unknown})

    def resolve(value: str) -> Path:
        candidate = Path(value).expanduser()
        return candidate if candidate.is_absolute() else base_dir / candidate

    if out_dir is not None:
        resolved_out = Path(out_dir)
    elif 'out_dir' in paths_section:
        resolved_out = resolve(paths_section['out_dir'])
    else:
        resolved_out = Path(settings.MEDSEARCH_OUT_DIR)

    config = ExperimentConfig(
        out_dir=resolved_out,
        seed=seed if seed is not None else _parse_int(experiment.get('seed', settings.MEDSEARCH_SEED), 'experiment', 'seed'),
        threads=threads if threads is not None else _parse_int(
            experiment.get('threads', settings.MEDSEARCH_THREADS), 'experiment', 'threads'),
        eval_ks=_parse_ks(experiment.get('eval_ks', constants.DEFAULT_EVAL_KS)),
        top_k=_parse_int(pipeline.get('top_k', constants.DEFAULT_TOP_K), 'pipeline', 'top_k'),
        encode_chunk_size=_parse_int(pipeline.get('encode_chunk_size', constants.DEFAULT_ENCODE_CHUNK_SIZE),
                                     'pipeline', 'encode_chunk_size'),
        paths={name: resolve(paths_section[name]) for name in CONFIGURABLE_PATHS if name in paths_section},
        sections=sections,
        source=source,
    )
    # Build every sub-config once so bad values fail at command start.
    config.effective()
    logger.info(f"Loaded experiment config (seed {config.seed}, out_dir {config.out_dir})")
    return config

