import csv
import math

import numpy as np
import pytest
from django.test import SimpleTestCase

from encoder.network import BiEncoder
from evalkit.bm25 import Bm25Config, Bm25Index, bm25_rank
from evalkit.metrics import map_at_k, ndcg_at_k, pearson
from evalkit.services import (
    evaluate,
    scaling_curve,
    sentence_similarity,
    similarity_correlation,
    validate_sizes,
    write_scaling_curve,
)
from evalkit.trec import Qrels, Run, load_qrels, load_run, write_qrels, write_run
from medsearch.corpus import Article
from medsearch.exceptions import (
    ConfigurationError,
    EmptyCorpusError,
    EmptyQrelsError,
    ScalingSizeError,
    TrecParseError,
    UndefinedCorrelationError,
)
from retrieval.index import RankedList
from training.types import ClickPair, RetrieverTrainConfig


def ranked(qid, *doc_ids):
    """RankedList in the given order with strictly falling scores."""
    return RankedList(qid, tuple((doc_id, float(len(doc_ids) - i)) for i, doc_id in enumerate(doc_ids)))


@pytest.mark.evalkit
@pytest.mark.unit
class TestRankingMetrics(SimpleTestCase):
    """Test NDCG and MAP against hand-computed values"""

    def test_ndcg_at_2_single_relevant_second(self):
        run = Run([ranked('q1', 'b', 'a')])
        result = ndcg_at_k(run, Qrels({'q1': {'a': 1}}), 2)
        assert result.mean == pytest.approx(1 / math.log2(3))

    def test_ndcg_graded_gain(self):
        run = Run([ranked('q1', 'b', 'a')])
        result = ndcg_at_k(run, Qrels({'q1': {'a': 2, 'b': 1}}), 2)
        expected = (1 + 3 / math.log2(3)) / (3 + 1 / math.log2(3))
        assert result.per_query['q1'] == pytest.approx(expected)

    def test_ndcg_perfect_ranking(self):
        run = Run([ranked('q1', 'a', 'b', 'c')])
        assert ndcg_at_k(run, Qrels({'q1': {'a': 3, 'b': 1}}), 3).mean == pytest.approx(1.0)

    def test_ndcg_cutoff_ignores_later_hits(self):
        run = Run([ranked('q1', 'x', 'y', 'a')])
        assert ndcg_at_k(run, Qrels({'q1': {'a': 1}}), 2).mean == 0.0

    def test_map_averages_precision_at_hits(self):
        run = Run([ranked('q1', 'a', 'b', 'c')])
        result = map_at_k(run, Qrels({'q1': {'a': 1, 'c': 1}}), 3)
        assert result.mean == pytest.approx((1 + 2 / 3) / 2)

    def test_map_normalises_by_min_k_relevant(self):
        run = Run([ranked('q1', 'x', 'a', 'b')])
        qrels = Qrels({'q1': {'a': 1, 'b': 1, 'c': 1}})
        assert map_at_k(run, qrels, 2).mean == pytest.approx(0.5 / 2)
        assert map_at_k(Run([ranked('q1', 'a')]), qrels, 1).mean == pytest.approx(1.0)

    def test_missing_query_scores_zero(self):
        run = Run([ranked('q1', 'a')])
        result = ndcg_at_k(run, Qrels({'q1': {'a': 1}, 'q2': {'b': 1}}), 5)
        assert result.per_query == {'q1': 1.0, 'q2': 0.0}
        assert result.mean == pytest.approx(0.5)

    def test_unjudged_queries_are_left_out(self):
        run = Run([ranked('q1', 'a'), ranked('q2', 'b')])
        result = map_at_k(run, Qrels({'q1': {'a': 1}, 'q2': {'b': 0}}), 5)
        assert list(result.per_query) == ['q1']

    def test_no_positive_judgments(self):
        with pytest.raises(EmptyQrelsError):
            ndcg_at_k(Run(), Qrels({'q1': {'a': 0}}), 5)

    def test_k_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            map_at_k(Run(), Qrels({'q1': {'a': 1}}), 0)

    def test_qrels_restrict_by_prefix(self):
        qrels = Qrels({'hd00001': {'a': 1}, 'hq00002': {'b': 1}})
        assert list(qrels.restrict('hd')) == ['hd00001']


def reference_ndcg(doc_ids, grades, k):
    gains = np.array([2.0 ** grades.get(doc_id, 0) - 1.0 for doc_id in doc_ids[:k]])
    ideal_gains = 2.0 ** np.sort(np.array(list(grades.values()), dtype=np.float64))[::-1][:k] - 1.0
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    ideal = float(ideal_gains @ discounts[:len(ideal_gains)])
    return float(gains @ discounts[:len(gains)]) / ideal if ideal else 0.0


def reference_average_precision(doc_ids, grades, k):
    hits = np.array([grades.get(doc_id, 0) > 0 for doc_id in doc_ids[:k]], dtype=np.float64)
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    relevant = sum(1 for grade in grades.values() if grade > 0)
    return float(precision @ hits) / min(k, relevant)


def random_instance(rng, max_grade=3):
    """Ranked ids with distinct falling scores and graded judgments holding at least one positive."""
    pool = [f"d{i:02d}" for i in range(int(rng.integers(1, 30)))]
    judged = [pool[i] for i in rng.choice(len(pool), size=int(rng.integers(1, len(pool) + 1)), replace=False)]
    grades = {doc_id: int(rng.integers(0, max_grade + 1)) for doc_id in judged}
    grades[judged[0]] = max(1, grades[judged[0]])
    order = [pool[i] for i in rng.permutation(len(pool))[:int(rng.integers(1, len(pool) + 1))]]
    return ranked('q1', *order), grades, int(rng.integers(1, 21))


@pytest.mark.evalkit
@pytest.mark.unit
class TestMetricProperties(SimpleTestCase):
    """Test NDCG and MAP against direct definitions on random rankings"""

    def test_matches_reference_definitions(self):
        rng = np.random.default_rng(21)
        for _ in range(1000):
            result, grades, k = random_instance(rng)
            run, qrels = Run([result]), Qrels({'q1': grades})
            assert abs(ndcg_at_k(run, qrels, k).mean - reference_ndcg(result.doc_ids, grades, k)) < 1e-12
            assert abs(map_at_k(run, qrels, k).mean - reference_average_precision(result.doc_ids, grades, k)) < 1e-12

    def test_ndcg_bounded_and_blind_past_cutoff(self):
        rng = np.random.default_rng(22)
        for _ in range(300):
            result, grades, k = random_instance(rng)
            qrels = Qrels({'q1': grades})
            score = ndcg_at_k(Run([result]), qrels, k).mean
            assert 0.0 <= score <= 1.0 + 1e-12
            if len(result.doc_ids) < k:
                continue
            tail = [doc_id for doc_id in grades if doc_id not in result.doc_ids] + ['unjudged']
            padded = ranked('q1', *(result.doc_ids[:k] + tail + result.doc_ids[k:]))
            assert ndcg_at_k(Run([padded]), qrels, k).mean == pytest.approx(score, abs=1e-12)

    def test_promoting_a_better_document_never_lowers_ndcg(self):
        rng = np.random.default_rng(23)
        for _ in range(300):
            result, grades, k = random_instance(rng)
            doc_ids = result.doc_ids
            if len(doc_ids) < 2:
                continue
            i, j = sorted(rng.choice(len(doc_ids), size=2, replace=False).tolist())
            if grades.get(doc_ids[j], 0) <= grades.get(doc_ids[i], 0):
                continue
            swapped = list(doc_ids)
            swapped[i], swapped[j] = swapped[j], swapped[i]
            qrels = Qrels({'q1': grades})
            before = ndcg_at_k(Run([result]), qrels, k).mean
            after = ndcg_at_k(Run([ranked('q1', *swapped)]), qrels, k).mean
            assert after >= before - 1e-12

    def test_agrees_with_trec_eval_where_conventions_match(self):
        pytrec_eval = pytest.importorskip('pytrec_eval')
        rng = np.random.default_rng(24)
        checked = 0
        for _ in range(200):
            result, grades, k = random_instance(rng, max_grade=1)
            relevant = sum(1 for grade in grades.values() if grade > 0)
            if relevant > k:
                continue
            # trec_eval orders by score, so scores stay distinct
            run = {'q1': {doc_id: score for doc_id, score in result.entries}}
            measures = {f"ndcg_cut.{k}", f"map_cut.{k}"}
            expected = pytrec_eval.RelevanceEvaluator({'q1': grades}, measures).evaluate(run)['q1']
            ours = Run([result]), Qrels({'q1': grades})
            assert ndcg_at_k(*ours, k).mean == pytest.approx(expected[f"ndcg_cut_{k}"], abs=1e-9)
            assert map_at_k(*ours, k).mean == pytest.approx(expected[f"map_cut_{k}"], abs=1e-9)
            checked += 1
        assert checked > 50


@pytest.mark.evalkit
@pytest.mark.unit
class TestPearson(SimpleTestCase):
    """Test the correlation used for sentence similarity"""

    def test_known_value(self):
        assert pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)

    def test_perfect_correlations(self):
        assert pearson([1, 2, 3, 4], [2, 4, 6, 8]) == pytest.approx(1.0)
        assert pearson([1, 2, 3, 4], [8, 6, 4, 2]) == pytest.approx(-1.0)

    def test_constant_input(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson([1, 1, 1], [1, 2, 3])

    def test_length_mismatch(self):
        with pytest.raises(ConfigurationError):
            pearson([1, 2], [1, 2, 3])


@pytest.mark.evalkit
@pytest.mark.unit
class TestTrecFiles(SimpleTestCase):
    """Test TREC qrels and run parsing"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, tmp_path):
        self.tmp_path = tmp_path

    def test_qrels_file(self):
        path = write_qrels({'q1': {'a': 1, 'b': 0}, 'q2': {'c': 2}}, self.tmp_path / 'test.qrels')
        qrels = load_qrels(path)
        assert qrels['q1'] == {'a': 1, 'b': 0}
        assert qrels.judged_queries() == ['q1', 'q2']

    def test_qrels_field_count_error_names_line(self):
        path = self.tmp_path / 'bad.qrels'
        path.write_text('q1 0 a 1\nq1 0 b\n', encoding='utf-8')
        with pytest.raises(TrecParseError) as excinfo:
            load_qrels(path)
        assert excinfo.value.context['line'] == 2
        assert excinfo.value.location() == f"{path}:2"

    def test_qrels_grade_must_be_integer(self):
        path = self.tmp_path / 'bad.qrels'
        path.write_text('q1 0 a high\n', encoding='utf-8')
        with pytest.raises(TrecParseError):
            load_qrels(path)

    def test_qrels_grade_must_be_non_negative(self):
        path = self.tmp_path / 'bad.qrels'
        path.write_text('\nq1 0 a -1\n', encoding='utf-8')
        with pytest.raises(TrecParseError) as excinfo:
            load_qrels(path)
        assert excinfo.value.context['line'] == 2

    def test_run_file_keeps_exact_scores(self):
        run = Run([RankedList('q1', (('a', 0.1 + 0.2), ('b', -1e-17))), ranked('q2', 'c')])
        path = write_run(run, self.tmp_path / 'run.trec')

        loaded = load_run(path)

        assert loaded['q1'].entries == run['q1'].entries
        assert path.read_text(encoding='utf-8').splitlines()[0] == f"q1 Q0 a 1 {0.1 + 0.2!r} medsearch"

    def test_run_is_resorted_by_score(self):
        path = self.tmp_path / 'run.trec'
        path.write_text('q1 Q0 b 1 0.5 x\nq1 Q0 a 2 0.9 x\n', encoding='utf-8')
        assert load_run(path)['q1'].doc_ids == ['a', 'b']

    def test_run_rank_order_disagreeing_with_scores_is_logged(self):
        path = self.tmp_path / 'run.trec'
        path.write_text('q1 Q0 b 1 0.5 x\nq1 Q0 a 2 0.9 x\nq2 Q0 c 1 0.3 x\n', encoding='utf-8')
        with self.assertLogs('evalkit.trec', level='WARNING') as logs:
            load_run(path)
        assert 'for 1 queries (first: q1)' in logs.output[0]

    def test_run_repeated_rank(self):
        path = self.tmp_path / 'run.trec'
        path.write_text('q1 Q0 a 1 0.5 x\nq2 Q0 a 1 0.5 x\nq1 Q0 b 1 0.4 x\n', encoding='utf-8')
        with pytest.raises(TrecParseError) as excinfo:
            load_run(path)
        assert excinfo.value.context['line'] == 3

    def test_run_rank_must_be_positive(self):
        path = self.tmp_path / 'run.trec'
        path.write_text('q1 Q0 a 0 0.5 x\n', encoding='utf-8')
        with pytest.raises(TrecParseError, match='rank must be >= 1'):
            load_run(path)

    def test_run_bad_score(self):
        path = self.tmp_path / 'run.trec'
        path.write_text('q1 Q0 a 1 0.5 x\nq1 Q0 b 2 high x\n', encoding='utf-8')
        with pytest.raises(TrecParseError) as excinfo:
            load_run(path)
        assert excinfo.value.context['line'] == 2

    def test_run_repeated_document(self):
        path = self.tmp_path / 'run.trec'
        path.write_text('q1 Q0 a 1 0.5 x\nq1 Q0 a 2 0.4 x\n', encoding='utf-8')
        with pytest.raises(TrecParseError):
            load_run(path)


@pytest.mark.evalkit
@pytest.mark.unit
class TestBm25(SimpleTestCase):
    """Test the BM25 baseline"""

    def setUp(self):
        self.articles = [Article('d1', 'alpha beta'), Article('d2', 'gamma'), Article('d0', 'delta')]

    def test_score_matches_formula(self):
        index = Bm25Index(self.articles[:2])
        # N=2, df=1: idf = ln 2; len 2 against average 1.5
        expected = math.log(2) * 2.2 / (1 + 1.2 * (0.25 + 0.75 * 2 / 1.5))
        assert index.scores('alpha')[0] == pytest.approx(expected)
        assert index.scores('alpha')[1] == 0.0

    def test_idf_decreases_with_document_frequency(self):
        index = Bm25Index([Article('a', 'x y'), Article('b', 'x'), Article('c', 'z')])
        assert index.idf('x') < index.idf('y')
        assert index.idf('y') == pytest.approx(math.log(1 + 2.5 / 1.5))

    def test_repeated_query_terms_count_twice(self):
        index = Bm25Index(self.articles)
        assert index.scores('alpha alpha')[0] == pytest.approx(2 * index.scores('alpha')[0])

    def test_term_frequency_saturates(self):
        length = 16
        articles = [Article(f"t{tf:02d}", ' '.join(['x'] * tf + [f"w{tf}n{j}" for j in range(length - tf)]))
                    for tf in range(1, length + 1)]
        articles.append(Article('none', ' '.join(f"w0n{j}" for j in range(length))))
        for config in (Bm25Config(), Bm25Config(k1=2.0, b=0.3), Bm25Config(k1=0.8, b=0.0)):
            index = Bm25Index(articles, config)
            scores = index.scores('x')[:length]
            bound = index.idf('x') * (config.k1 + 1.0)

            steps = np.diff(scores)
            assert np.all(steps > 0)
            assert np.all(np.diff(steps) < 0)
            assert np.all(scores < bound)
            assert index.scores('x')[length] == 0.0

    def test_rank_puts_match_first_and_ties_by_id(self):
        result = bm25_rank('gamma', self.articles, Bm25Config(), 3, qid='q1')
        assert result.doc_ids == ['d2', 'd0', 'd1']

    def test_rank_truncates_to_k(self):
        index = Bm25Index(self.articles)
        assert index.rank('beta', 1).doc_ids == ['d1']

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpusError):
            Bm25Index([])

    def test_invalid_parameters(self):
        with pytest.raises(ConfigurationError):
            Bm25Config(b=1.5)


@pytest.mark.evalkit
class TestEvaluationServices(SimpleTestCase):
    """Test reports, sentence similarity and the scaling study"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, micro_config, tiny_corpus, tiny_vocab, tmp_path):
        self.config = micro_config
        self.corpus = tiny_corpus
        self.vocab = tiny_vocab
        self.tmp_path = tmp_path

    def test_evaluate_writes_summary_and_per_query_files(self):
        run = Run([ranked('q1', 'b', 'a'), ranked('q2', 'c')])
        qrels = Qrels({'q1': {'a': 1}, 'q2': {'c': 1}})
        report = evaluate(run, qrels, [1, 2])

        assert [(metric, k) for metric, k, _, _ in report.rows()] == [('ndcg', 1), ('ndcg', 2), ('map', 1), ('map', 2)]
        assert report.get('ndcg', 1).mean == pytest.approx(0.5)

        summary = report.write(self.tmp_path / 'metrics.csv', self.tmp_path / 'metrics_per_query.csv')
        with summary.open(encoding='utf-8') as handle:
            rows = list(csv.DictReader(handle))
        assert rows[0]['per_query_file'] == 'metrics_per_query.csv'
        assert int(rows[0]['queries']) == 2
        with (self.tmp_path / 'metrics_per_query.csv').open(encoding='utf-8') as handle:
            assert len(list(csv.DictReader(handle))) == 8

    def test_evaluate_unknown_metric(self):
        with pytest.raises(ConfigurationError):
            evaluate(Run(), Qrels({'q1': {'a': 1}}), [1], metrics=['mrr'])

    def test_sentence_similarity(self):
        model = BiEncoder(self.config)
        forward = sentence_similarity(model, self.vocab, 'insulin resistance', 'statin therapy')
        backward = sentence_similarity(model, self.vocab, 'statin therapy', 'insulin resistance')
        assert forward == pytest.approx(backward)
        assert sentence_similarity(model, self.vocab, 'asthma', 'asthma', 'cosine') == pytest.approx(1.0)

    def test_sentence_similarity_unknown_metric(self):
        with pytest.raises(ConfigurationError):
            sentence_similarity(BiEncoder(self.config), self.vocab, 'a', 'b', 'euclid')

    def test_similarity_correlation(self):
        rows = [('insulin resistance', 'insulin sensitivity', 3.0),
                ('statin therapy', 'asthma attacks', 0.5),
                ('vitamin d', 'bone density', 2.0),
                ('sleep apnea', 'influenza vaccine', 0.0)]
        r, predictions = similarity_correlation(BiEncoder(self.config), self.vocab, rows)
        assert len(predictions) == 4
        assert -1.0 <= r <= 1.0

    def test_validate_sizes(self):
        assert validate_sizes([2, 4], 8) == [2, 4]
        for sizes in ([], [0, 2], [4, 2], [2, 2], [4, 16]):
            with pytest.raises(ScalingSizeError):
                validate_sizes(sizes, 8)

    def test_single_pair_size_is_rejected(self):
        with pytest.raises(ScalingSizeError, match="at least 2"):
            validate_sizes([1], 8)
        with pytest.raises(ScalingSizeError):
            validate_sizes([1, 4], 8)
        assert validate_sizes([2], 2) == [2]

    def test_scaling_curve_rows(self):
        pairs = [ClickPair(f"q{i}", article.title, article.id) for i, article in enumerate(self.corpus.articles())]
        queries = [('hq00001', 'insulin signalling'), ('hq00002', 'cardiac events')]
        qrels = Qrels({'hq00001': {'D001': 1}, 'hq00002': {'D002': 1}})
        train_config = RetrieverTrainConfig(batch_size=4, steps=1, warmup_steps=0, seed=2)

        rows = scaling_curve(pairs, [2, 8], self.corpus, self.vocab, self.config, train_config, queries, qrels, k=5)

        assert [size for size, _ in rows] == [2, 8]
        assert all(0.0 <= score <= 1.0 for _, score in rows)
        path = write_scaling_curve(self.tmp_path / 'curve.csv', rows, k=5)
        assert path.read_text(encoding='utf-8').splitlines()[0] == 'pairs,ndcg@5'
