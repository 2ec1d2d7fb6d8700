"""
Tests for experiment configuration, error handling and the management-command pipeline.
"""
import configparser
import json
import math
from io import StringIO
from pathlib import Path
from unittest.mock import patch

import pytest
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from evalkit.trec import load_run
from medsearch.corpus import Article, Corpus, load_corpus, write_corpus
from medsearch.exceptions import (
    EXIT_DATA,
    EXIT_NUMERIC,
    EXIT_USAGE,
    ConfigurationError,
    DuplicateArticleError,
    InvalidRecordError,
    MissingPathError,
    NumericFailureError,
    UnresolvedArticleError,
    get_error_context,
)
from medsearch.experiment import EFFECTIVE_CONFIG_NAME, load_experiment
from medsearch.monitoring import PerformanceMonitor, StageMetric, StageTimer
from medsearch.seeding import derive_rng, derive_seed
from medsearch.validation import InputValidator
from retrieval.index import load_index
from training.types import read_instances


def run_command(name, *args):
    out = StringIO()
    call_command(name, *args, stdout=out, stderr=StringIO())
    return out.getvalue()


@pytest.mark.unit
class TestExceptions(SimpleTestCase):
    """Test error codes, exit statuses and context rendering"""

    def test_exit_codes_follow_error_family(self):
        assert ConfigurationError().exit_code == EXIT_USAGE
        assert InvalidRecordError().exit_code == EXIT_DATA
        assert NumericFailureError().exit_code == EXIT_NUMERIC

    def test_location_from_context(self):
        error = InvalidRecordError(message='bad', context=get_error_context(path='logs.jsonl', line=7))
        assert error.location() == 'logs.jsonl:7'
        assert error.to_dict()['details'] == {'path': 'logs.jsonl', 'line': 7}

    def test_error_is_logged_on_construction(self):
        with self.assertLogs('medsearch.exceptions', level='WARNING') as logs:
            MissingPathError(message='Required file not found: x')
        assert '[PATH_NOT_FOUND] Required file not found: x' in logs.output[0]


@pytest.mark.unit
class TestCorpusAndValidation(SimpleTestCase):
    """Test the article corpus and the input-file helpers"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, tmp_path, tiny_corpus):
        self.tmp_path = tmp_path
        self.corpus = tiny_corpus

    def test_article_text_joins_title_and_abstract(self):
        assert Article('a', 'Title', 'Body').text == 'Title Body'
        assert Article('a', 'Title').text == 'Title'

    def test_corpus_rejects_duplicates(self):
        with pytest.raises(DuplicateArticleError):
            Corpus([Article('a', 'x'), Article('a', 'y')])

    def test_resolve_unknown_article(self):
        with pytest.raises(UnresolvedArticleError):
            self.corpus.resolve('D404')

    def test_corpus_file(self):
        path = self.tmp_path / 'corpus.jsonl'
        write_corpus(path, self.corpus.articles())
        assert load_corpus(path).articles() == self.corpus.articles()

    def test_corpus_file_duplicate_reports_line(self):
        path = self.tmp_path / 'corpus.jsonl'
        path.write_text('{"id":"a","title":"x","abstract":""}\n{"id":"a","title":"y","abstract":""}\n',
                        encoding='utf-8')
        with pytest.raises(DuplicateArticleError) as excinfo:
            load_corpus(path)
        assert excinfo.value.context['line'] == 2

    def test_record_must_be_an_object(self):
        with pytest.raises(InvalidRecordError):
            InputValidator.validate_json_line('[1, 2]', 'x.jsonl', 1)

    def test_tsv_column_count(self):
        path = self.tmp_path / 'queries.tsv'
        path.write_text('q1\tinsulin\nq2\n', encoding='utf-8')
        with pytest.raises(InvalidRecordError) as excinfo:
            InputValidator.read_tsv_pairs(path)
        assert excinfo.value.context['line'] == 2

    def test_tsv_written_rows_read_back(self):
        path = self.tmp_path / 'queries.tsv'
        InputValidator.write_tsv(path, [('q1', 'insulin'), ('q2', 'asthma children')])
        assert InputValidator.read_tsv_pairs(path) == [('q1', 'insulin'), ('q2', 'asthma children')]


@pytest.mark.unit
class TestSeedingAndMonitoring(SimpleTestCase):
    """Test named seed derivation and stage timing"""

    def test_derived_seeds_are_stable_and_distinct(self):
        assert derive_seed(13, 'retriever', 'init') == derive_seed(13, 'retriever', 'init')
        assert derive_seed(13, 'retriever', 'init') != derive_seed(13, 'reranker', 'init')
        assert derive_seed(13, 'retriever') != derive_seed(14, 'retriever')
        assert 0 <= derive_seed(13, 'x') < 2 ** 63

    def test_derived_rng(self):
        assert derive_rng(1, 'a').integers(1000, size=5).tolist() == derive_rng(1, 'a').integers(1000, size=5).tolist()

    def test_stage_timer_records_counts_and_failures(self):
        monitor = PerformanceMonitor()
        with StageTimer('encode', monitor) as timer:
            timer.counts['articles'] = 3
        with pytest.raises(RuntimeError):
            with StageTimer('encode', monitor):
                raise RuntimeError('boom')

        first, second = monitor.stage_times['encode']
        assert first.counts == {'articles': 3}
        assert not first.failed
        assert second.failed

    def test_slow_stages(self):
        monitor = PerformanceMonitor()
        monitor.record(StageMetric('train', 90.0))
        monitor.record(StageMetric('encode', 2.0))
        assert [row['stage'] for row in monitor.get_slow_stages(60.0)] == ['train']


@pytest.mark.unit
class TestExperimentConfig(SimpleTestCase):
    """Test config layering, validation and derived seeds"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, tmp_path, experiment_config_factory):
        self.tmp_path = tmp_path
        self.factory = experiment_config_factory

    def test_defaults_without_a_file(self):
        experiment = load_experiment()
        assert experiment.seed == settings.MEDSEARCH_SEED
        assert experiment.out_dir == Path(settings.MEDSEARCH_OUT_DIR)
        assert experiment.eval_ks == (10,)

    def test_file_values(self):
        experiment = load_experiment(self.factory())
        assert experiment.seed == 11
        assert experiment.eval_ks == (5, 10)
        assert experiment.top_k == 20
        assert experiment.out_dir == self.tmp_path / 'out'
        assert experiment.retriever_config().steps == 4

    def test_flags_override_file(self):
        experiment = load_experiment(self.factory(), seed=5, threads=2, out_dir=self.tmp_path / 'elsewhere',
                                     overrides={'retriever': {'steps': 9}})
        assert experiment.seed == 5
        assert experiment.threads == 2
        assert experiment.out_dir == self.tmp_path / 'elsewhere'
        assert experiment.retriever_config().steps == 9

    def test_relative_paths_resolve_against_config_directory(self):
        path = self.factory(paths={'corpus': 'data/articles.jsonl'})
        experiment = load_experiment(path)
        assert experiment.path('corpus') == self.tmp_path.resolve() / 'data' / 'articles.jsonl'
        assert experiment.path('logs') == self.tmp_path / 'out' / 'logs.jsonl'

    def test_unknown_section(self):
        path = self.tmp_path / 'bad.ini'
        path.write_text('[optimizer]\nlr = 1\n', encoding='utf-8')
        with pytest.raises(ConfigurationError):
            load_experiment(path)

    def test_unknown_key_in_component_section(self):
        with pytest.raises(ConfigurationError):
            load_experiment(self.factory(retriever={'momentum': 0.9}))

    def test_unknown_key_in_experiment_section(self):
        with pytest.raises(ConfigurationError):
            load_experiment(self.factory(experiment={'verbose': 1}))

    def test_bad_integer(self):
        with pytest.raises(ConfigurationError):
            load_experiment(self.factory(pipeline={'top_k': 'many'}))

    def test_bad_eval_ks(self):
        with pytest.raises(ConfigurationError):
            load_experiment(self.factory(experiment={'eval_ks': '0,5'}))

    def test_missing_file(self):
        with pytest.raises(ConfigurationError):
            load_experiment(self.tmp_path / 'absent.ini')

    def test_component_seeds_derive_from_global_seed(self):
        experiment = load_experiment(self.factory())
        assert experiment.retriever_config().seed == derive_seed(11, 'retriever', 'batches')
        assert experiment.corpus_config().seed == derive_seed(11, 'gen_corpus')
        assert experiment.encoder_config('retriever').seed == derive_seed(11, 'retriever', 'init')
        assert experiment.encoder_config('retriever').seed != experiment.encoder_config('reranker').seed

    def test_section_seed_wins(self):
        experiment = load_experiment(self.factory(reranker={'seed': 99}))
        assert experiment.reranker_config().seed == 99

    def test_encoder_sized_to_vocabulary(self):
        experiment = load_experiment(self.factory())
        assert experiment.encoder_config('retriever', 300).vocab_size == 300
        with pytest.raises(ConfigurationError):
            experiment.encoder_config('retriever', 5000)

    def test_effective_config_reloads_to_the_same_values(self):
        experiment = load_experiment(self.factory(bm25={'k1': 0.9}))
        path = experiment.write_effective(self.tmp_path / 'echo')
        assert path.name == EFFECTIVE_CONFIG_NAME

        reloaded = load_experiment(path)

        def sections(parser):
            return {name: dict(parser[name]) for name in parser.sections()}
        assert sections(reloaded.effective()) == sections(experiment.effective())
        assert reloaded.bm25_config().k1 == 0.9


@pytest.mark.integration
class TestCommandErrors(SimpleTestCase):
    """Test how stage commands map failures to exit statuses"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, tmp_path, experiment_config_factory):
        self.tmp_path = tmp_path
        self.config = str(experiment_config_factory())

    def test_missing_input_is_a_usage_error(self):
        with pytest.raises(CommandError) as excinfo:
            run_command('curate', '--config', self.config)
        assert excinfo.value.returncode == EXIT_USAGE
        assert '[curate]' in str(excinfo.value)

    def test_malformed_input_is_a_data_error(self):
        qrels = self.tmp_path / 'bad.qrels'
        qrels.write_text('q1 0 a\n', encoding='utf-8')
        run = self.tmp_path / 'run.trec'
        run.write_text('q1 Q0 a 1 1.0 x\n', encoding='utf-8')
        with pytest.raises(CommandError) as excinfo:
            run_command('eval', '--config', self.config, '--qrels', str(qrels), '--run', str(run))
        assert excinfo.value.returncode == EXIT_DATA
        assert f"{qrels}:1" in str(excinfo.value)

    def test_bad_flag_value_is_a_usage_error(self):
        with pytest.raises(CommandError) as excinfo:
            run_command('search', '--config', self.config, '--k', 'many')
        assert excinfo.value.returncode == EXIT_USAGE

    def test_invalid_config_is_a_usage_error(self):
        with pytest.raises(CommandError) as excinfo:
            run_command('gen_corpus', '--config', self.config, '--distractor-rate', '2.0')
        assert excinfo.value.returncode == EXIT_USAGE

    @patch('medsearch.commands.load_experiment')
    def test_os_errors_are_data_errors(self, mock_load):
        mock_load.side_effect = OSError('disk full')
        with pytest.raises(CommandError) as excinfo:
            run_command('gen_corpus', '--config', self.config)
        assert excinfo.value.returncode == EXIT_DATA

    @patch('logkit.management.commands.gen_corpus.generate_corpus')
    def test_numeric_failures_exit_three(self, mock_generate):
        mock_generate.side_effect = NumericFailureError(message='Non-finite values in test')
        with pytest.raises(CommandError) as excinfo:
            run_command('gen_corpus', '--config', self.config)
        assert excinfo.value.returncode == EXIT_NUMERIC


@pytest.mark.integration
@pytest.mark.slow
class TestPipelineCommands(SimpleTestCase):
    """Run the stage commands end to end on a micro experiment"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, tmp_path, experiment_config_factory):
        self.tmp_path = tmp_path
        self.config = str(experiment_config_factory())
        self.out = tmp_path / 'out'

    def stage(self, name, *args):
        return run_command(name, '--config', self.config, *args)

    def prepare_training_data(self):
        self.stage('gen_corpus')
        self.stage('gen_logs')
        self.stage('curate')
        self.stage('build_vocab')

    def test_data_stages(self):
        output = self.stage('gen_corpus')
        corpus = load_corpus(self.out / 'corpus.jsonl')
        assert f'{len(corpus)} articles' in output
        assert (self.out / 'synonyms.json').exists()
        assert (self.out / EFFECTIVE_CONFIG_NAME).exists()

        output = self.stage('gen_logs')
        for line in ('keyword: 40', 'nonkeyword: 80', 'navigational: 10', 'total: 130', 'held-out queries: 8'):
            assert line in output
        queries = InputValidator.read_tsv_pairs(self.out / 'heldout_queries.tsv')
        assert len(queries) == 8
        assert all(qid[:2] in ('hd', 'hq') for qid, _ in queries)

        output = self.stage('curate')
        assert 'log_records: 130' in output
        assert 'informational_records: 120' in output
        stats = json.loads((self.out / 'curation_stats.json').read_text(encoding='utf-8'))
        assert stats['generator_audit'] == {'keyword_misclassified': 0, 'nonkeyword_misclassified': 0}

        output = self.stage('build_vocab')
        assert (self.out / 'vocab.txt').exists()
        assert 'Vocabulary of' in output

    def test_training_retrieval_and_evaluation(self):
        self.prepare_training_data()

        output = self.stage('train_retriever')
        assert 'held-out loss' in output
        assert len((self.out / 'retriever_loss.csv').read_text(encoding='utf-8').splitlines()) == 5

        corpus = load_corpus(self.out / 'corpus.jsonl')
        self.stage('encode_corpus')
        assert load_index(self.out / 'corpus.medv').ids == tuple(corpus)
        output = self.stage('encode_corpus')
        assert f'({math.ceil(len(corpus) / 16)} chunks reused)' in output

        self.stage('mine_negatives')
        instances = read_instances(self.out / 'rerank_instances.jsonl')
        assert instances
        assert all(1 <= len(i.negs) <= 3 and i.pos not in i.negs for i in instances)

        self.stage('train_reranker')
        assert (self.out / 'reranker.mckp').exists()

        self.stage('search')
        first_stage = load_run(self.out / 'run.trec')
        assert len(first_stage) == 8
        assert all(len(first_stage[qid]) == 20 for qid in first_stage)

        self.stage('rerank')
        reranked = load_run(self.out / 'reranked.trec')
        assert all(set(reranked[qid].doc_ids) == set(first_stage[qid].doc_ids) for qid in first_stage)

        output = self.stage('eval', '--run', str(self.out / 'reranked.trec'))
        lines = output.splitlines()
        assert lines[0] == 'metric,k,mean,queries,per_query_file'
        assert [line.split(',')[:2] for line in lines[1:]] == [['ndcg', '5'], ['ndcg', '10'], ['map', '5'], ['map', '10']]
        assert (self.out / 'metrics_per_query.csv').exists()

        self.stage('search', '--first-stage', 'bm25', '--k', '5', '--output', str(self.tmp_path / 'bm25.trec'))
        bm25 = load_run(self.tmp_path / 'bm25.trec')
        assert all(len(bm25[qid]) == 5 for qid in bm25)

        effective = configparser.ConfigParser(interpolation=None)
        effective.read(self.out / EFFECTIVE_CONFIG_NAME, encoding='utf-8')
        assert effective['pipeline']['top_k'] == '5'

    def test_similarity_and_scaling_curve(self):
        self.prepare_training_data()
        self.stage('train_retriever')

        articles = load_corpus(self.out / 'corpus.jsonl').articles()
        pairs = self.tmp_path / 'sts.tsv'
        InputValidator.write_tsv(pairs, [
            (articles[0].title, articles[0].title, 5.0),
            (articles[0].title, articles[1].abstract, 2.0),
            (articles[2].title, articles[3].title, 1.0),
        ])
        output = self.stage('eval_similarity', '--pairs', str(pairs))
        assert output.startswith('pearson_r,')
        assert -1.0 <= float(output.strip().split(',')[1]) <= 1.0

        output = self.stage('scaling_curve', '--sizes', '8,16', '--k', '5')
        assert '8: NDCG@5' in output
        lines = (self.out / 'scaling_curve.csv').read_text(encoding='utf-8').splitlines()
        assert lines[0] == 'pairs,ndcg@5'
        assert [line.split(',')[0] for line in lines[1:]] == ['8', '16']

    def test_out_dir_flag_redirects_outputs(self):
        other = self.tmp_path / 'other'
        self.stage('gen_corpus', '--out-dir', str(other), '--num-articles', '5')
        assert len(load_corpus(other / 'corpus.jsonl')) >= 5
        assert not (self.out / 'corpus.jsonl').exists()


def mean_metric(output, metric='ndcg', k=10):
    for row in output.splitlines()[1:]:
        fields = row.split(',')
        if fields[:2] == [metric, str(k)]:
            return float(fields[2])
    raise AssertionError(f"{metric}@{k} missing from:\n{output}")


@pytest.mark.integration
@pytest.mark.slow
class TestRetrievalQuality(SimpleTestCase):
    """Train the full pipeline on a small synthetic benchmark and compare rankers"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, tmp_path, experiment_config_factory):
        self.tmp_path = tmp_path
        self.out = tmp_path / 'out'
        self.config = str(experiment_config_factory(
            experiment={'eval_ks': '10'},
            pipeline={'top_k': '20', 'encode_chunk_size': '64'},
            corpus={'num_articles': '150', 'num_terms': '240', 'background_terms': '120',
                    'abstract_length': '12', 'distractor_rate': '0.0'},
            logs={'num_keyword': '300', 'num_nonkeyword': '2000', 'num_navigational': '20',
                  'heldout_queries': '30'},
            encoder={'hidden_size': '32', 'num_layers': '1', 'num_heads': '2', 'ffn_size': '64',
                     'max_query_length': '12', 'max_document_length': '32', 'max_cross_length': '48'},
            retriever={'batch_size': '32', 'steps': '500', 'warmup_steps': '25', 'learning_rate': '0.002',
                       'log_every': '50'},
            reranker={'num_negatives': '4', 'window_start': '2', 'window_end': '20', 'batch_size': '8',
                      'steps': '200', 'warmup_steps': '10', 'learning_rate': '0.001', 'log_every': '50'},
        ))

    def stage(self, name, *args):
        return run_command(name, '--config', self.config, *args)

    def train_pipeline(self):
        for name in ('gen_corpus', 'gen_logs', 'curate', 'build_vocab', 'train_retriever', 'encode_corpus',
                     'mine_negatives', 'train_reranker', 'search', 'rerank'):
            self.stage(name)

    def test_rankers_on_synonym_queries(self):
        self.train_pipeline()
        self.stage('search', '--first-stage', 'bm25', '--output', str(self.tmp_path / 'bm25.trec'))

        dense = mean_metric(self.stage('eval', '--run', str(self.out / 'run.trec')))
        two_stage = mean_metric(self.stage('eval', '--run', str(self.out / 'reranked.trec')))
        bm25 = mean_metric(self.stage('eval', '--run', str(self.tmp_path / 'bm25.trec')))

        # held-out queries share no word with any article
        assert bm25 <= 0.1
        assert dense >= bm25 + 0.1
        assert two_stage >= dense - 0.1

    def test_more_training_pairs_do_not_hurt(self):
        for name in ('gen_corpus', 'gen_logs', 'curate', 'build_vocab'):
            self.stage(name)
        self.stage('scaling_curve', '--sizes', '64,400,1600', '--k', '10')

        lines = (self.out / 'scaling_curve.csv').read_text(encoding='utf-8').splitlines()
        scores = [float(line.split(',')[1]) for line in lines[1:]]
        assert len(scores) == 3
        assert scores[-1] >= scores[0] - 0.01
