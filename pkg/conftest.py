"""
Global pytest fixtures for the medsearch retrieval engine.
Shared corpora, vocabularies and micro encoder configurations used across the app test modules.
"""
import pytest
import torch

from encoder.network import EncoderConfig
from encoder.vocab import build_vocab
from logkit.generation import generate_corpus
from logkit.types import CorpusGenConfig
from medsearch.corpus import Article, Corpus


TINY_ARTICLES = [
    ('D001', 'insulin resistance in obese adults', 'glucose uptake falls as insulin signalling weakens'),
    ('D002', 'statin therapy and cholesterol', 'statins lower cholesterol and cardiac events'),
    ('D003', 'asthma exacerbation in children', 'inhaled steroids reduce asthma attacks'),
    ('D004', 'vitamin d and bone density', 'vitamin d supplements raise bone density in elderly women'),
    ('D005', 'sleep apnea and hypertension', 'untreated apnea raises blood pressure'),
    ('D006', 'influenza vaccine effectiveness', 'the vaccine reduces influenza admissions'),
    ('D007', 'metformin and insulin sensitivity', 'metformin improves insulin sensitivity and glucose control'),
    ('D008', 'antibiotic resistance in hospitals', 'resistance spreads between hospital wards'),
]


# ===== ENCODER FIXTURES =====

@pytest.fixture
def micro_config():
    """h=16, L=2, A=2 encoder small enough for 64-bit gradient checks"""
    return EncoderConfig(
        hidden_size=16,
        num_layers=2,
        num_heads=2,
        ffn_size=32,
        vocab_size=100,
        max_query_length=12,
        max_document_length=24,
        max_cross_length=32,
        seed=7,
    )


@pytest.fixture
def double_precision():
    """Switch the default dtype to float64 for the duration of a test"""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


# ===== CORPUS FIXTURES =====

@pytest.fixture
def article_factory():
    """Factory for creating articles"""
    def create_article(article_id='D100', title='test title words', abstract='', **kwargs):
        return Article(article_id, title, abstract, **kwargs)
    return create_article


@pytest.fixture
def tiny_corpus():
    """Eight hand-written biomedical articles"""
    return Corpus(Article(*row) for row in TINY_ARTICLES)


@pytest.fixture
def tiny_vocab(tiny_corpus):
    return build_vocab(tiny_corpus.articles(), 100)


@pytest.fixture
def generated_corpus():
    """Small synthetic corpus with synonyms and a few distractors"""
    return generate_corpus(CorpusGenConfig(
        num_articles=30,
        num_terms=80,
        background_terms=40,
        title_length=4,
        abstract_length=12,
        distractor_rate=0.2,
        seed=3,
    ))


# ===== EXPERIMENT FIXTURES =====

@pytest.fixture
def experiment_config_factory(tmp_path):
    """Write a micro-scale experiment INI file and return its path"""
    def create_config(**sections):
        values = {
            'paths': {'out_dir': str(tmp_path / 'out')},
            'experiment': {'seed': '11', 'threads': '1', 'eval_ks': '5,10'},
            'pipeline': {'top_k': '20', 'encode_chunk_size': '16'},
            'corpus': {'num_articles': '40', 'num_terms': '90', 'background_terms': '40',
                       'abstract_length': '10', 'distractor_rate': '0.25'},
            'logs': {'num_keyword': '40', 'num_nonkeyword': '80', 'num_navigational': '10',
                     'heldout_queries': '8'},
            'encoder': {'hidden_size': '16', 'num_layers': '1', 'num_heads': '2', 'ffn_size': '32',
                        'vocab_size': '2000', 'max_query_length': '12', 'max_document_length': '24',
                        'max_cross_length': '32'},
            'retriever': {'batch_size': '8', 'grad_accumulation': '1', 'steps': '4', 'warmup_steps': '1',
                          'log_every': '2'},
            'reranker': {'num_negatives': '3', 'window_start': '2', 'window_end': '10', 'batch_size': '4',
                         'steps': '3', 'warmup_steps': '1', 'log_every': '1'},
        }
        for name, overrides in sections.items():
            values.setdefault(name, {}).update({key: str(value) for key, value in overrides.items()})
        path = tmp_path / 'experiment.ini'
        lines = []
        for name, entries in values.items():
            lines.append(f'[{name}]')
            lines.extend(f'{key} = {value}' for key, value in entries.items())
            lines.append('')
        path.write_text('\n'.join(lines), encoding='utf-8')
        return path
    return create_config


# ===== MARKS AND CONFIGURATIONS =====

def pytest_configure(config):
    """Configure custom pytest marks"""
    config.addinivalue_line("markers", "slow: mark test as slow running")
    config.addinivalue_line("markers", "integration: mark test as integration test")
    config.addinivalue_line("markers", "unit: mark test as unit test")
    config.addinivalue_line("markers", "gradcheck: mark test as finite-difference gradient check")
