import numpy as np
import pytest
from django.test import SimpleTestCase

from encoder.vocab import split_words
from logkit.curation import (
    KeywordRule,
    classify_queries,
    curate,
    extract_pairs,
    filter_navigational,
    is_keyword_query,
    merge_by_query,
    split_training_sets,
)
from logkit.generation import (
    DISTRACTOR_SUFFIX,
    draw_clicks,
    generate_benchmark,
    generate_corpus,
    generate_logs,
    is_distractor,
    substitute,
)
from logkit.types import CorpusGenConfig, LogGenConfig, LogRecord, read_logs, read_synonyms, write_logs
from medsearch.corpus import Article, Corpus
from medsearch.exceptions import (
    ConfigurationError,
    EmptyCorpusError,
    InvalidClickCountError,
    InvalidRecordError,
    SynonymMissingError,
    UnresolvedArticleError,
)
from training.types import ClickPair


LOG_CONFIG = LogGenConfig(num_keyword=30, num_nonkeyword=60, num_navigational=10, heldout_queries=5, seed=9)


@pytest.mark.logkit
@pytest.mark.unit
class TestCorpusGeneration(SimpleTestCase):
    """Test the synthetic corpus generator"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, generated_corpus):
        self.generated = generated_corpus

    def test_article_count_includes_distractors(self):
        sources = [a for a in self.generated.articles if not is_distractor(a.id)]
        assert len(sources) == 30
        assert len(self.generated.articles) == 30 + len(self.generated.distractors)

    def test_same_seed_same_corpus(self):
        again = generate_corpus(CorpusGenConfig(
            num_articles=30, num_terms=80, background_terms=40, title_length=4,
            abstract_length=12, distractor_rate=0.2, seed=3,
        ))
        assert again.articles == self.generated.articles
        assert again.synonyms == self.generated.synonyms

    def test_titles_have_distinct_terms(self):
        for article in self.generated.articles:
            words = split_words(article.title)
            assert len(words) == 4
            assert len(set(words)) == 4

    def test_synonyms_never_occur_in_articles(self):
        corpus_words = {word for a in self.generated.articles for word in split_words(a.text)}
        synonym_words = {s for synonyms in self.generated.synonyms.values() for s in synonyms}
        assert synonym_words
        assert not corpus_words & synonym_words

    def test_distractors_differ_in_one_title_term(self):
        corpus = Corpus(self.generated.articles)
        for source_id, twin_id in self.generated.distractors.items():
            assert twin_id == source_id + DISTRACTOR_SUFFIX
            source = split_words(corpus[source_id].title)
            twin = split_words(corpus[twin_id].title)
            assert sum(1 for a, b in zip(source, twin) if a != b) == 1

    def test_no_distractors_at_zero_rate(self):
        generated = generate_corpus(CorpusGenConfig(num_articles=10, num_terms=20, background_terms=5, seed=1))
        assert generated.distractors == {}

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            CorpusGenConfig(title_length=1)
        with pytest.raises(ConfigurationError):
            CorpusGenConfig(distractor_rate=1.5)


@pytest.mark.logkit
@pytest.mark.unit
class TestLogGeneration(SimpleTestCase):
    """Test click-log and held-out benchmark generation"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, generated_corpus):
        self.generated = generated_corpus
        self.corpus = Corpus(generated_corpus.articles)

    def test_kind_counts(self):
        logs = generate_logs(self.corpus, self.generated.synonyms, LOG_CONFIG)
        assert len(logs) == LOG_CONFIG.total
        for kind, expected in (('keyword', 30), ('nonkeyword', 60), ('navigational', 10)):
            assert sum(1 for record in logs if record.kind == kind) == expected

    def test_navigational_records_are_flagged(self):
        logs = generate_logs(self.corpus, self.generated.synonyms, LOG_CONFIG)
        assert all(record.navigational == (record.kind == 'navigational') for record in logs)

    def test_generation_is_seeded(self):
        first = generate_logs(self.corpus, self.generated.synonyms, LOG_CONFIG)
        second = generate_logs(self.corpus, self.generated.synonyms, LOG_CONFIG)
        assert first == second

    def test_excluded_articles_are_never_clicked(self):
        excluded = {article.id for article in self.generated.articles[:20]}
        logs = generate_logs(self.corpus, self.generated.synonyms, LOG_CONFIG, exclude=excluded)
        assert not excluded & {doc_id for record in logs for doc_id in record.clicked_ids}

    def test_click_counts_within_bounds(self):
        rng = np.random.default_rng(0)
        draws = [draw_clicks(rng, 1.5, 5) for _ in range(200)]
        assert min(draws) >= 1
        assert max(draws) <= 5

    def test_substitute_requires_synonyms(self):
        with pytest.raises(SynonymMissingError):
            substitute(['unknownterm'], self.generated.synonyms, np.random.default_rng(0))

    def test_benchmark_queries_and_qrels(self):
        benchmark = generate_benchmark(self.corpus, self.generated.synonyms, 10, seed=4)

        assert len(benchmark.queries) == 10
        for qid, text in benchmark.queries:
            relevant = benchmark.qrels[qid]
            source_id, = relevant
            assert relevant[source_id] == 1
            assert not is_distractor(source_id)
            has_twin = source_id + DISTRACTOR_SUFFIX in self.corpus
            assert qid.startswith('hd' if has_twin else 'hq')
            assert not set(split_words(text)) & set(split_words(self.corpus[source_id].text))

    def test_benchmark_excluded_ids_cover_distractors(self):
        benchmark = generate_benchmark(self.corpus, self.generated.synonyms, 10, seed=4)
        for source_id in benchmark.source_ids:
            assert source_id in benchmark.excluded_ids
            assert source_id + DISTRACTOR_SUFFIX in benchmark.excluded_ids

    def test_benchmark_caps_at_available_sources(self):
        benchmark = generate_benchmark(self.corpus, self.generated.synonyms, 500, seed=4)
        assert len(benchmark.queries) == 30

    def test_short_titles_only_feed_keyword_queries(self):
        corpus = Corpus([Article('d1', 'Aspirin', 'pain relief'), Article('d2', 'heart attack', 'chest pain')])
        synonyms = {'heart': ['cardiac'], 'attack': ['infarction']}
        cfg = LogGenConfig(num_keyword=10, num_nonkeyword=20, num_navigational=0, seed=2)
        logs = generate_logs(corpus, synonyms, cfg)

        nonkeyword = [record for record in logs if record.kind == 'nonkeyword']
        assert len(nonkeyword) == 20
        assert {doc_id for record in nonkeyword for doc_id in record.clicked_ids} == {'d2'}
        result = curate(logs, corpus)
        assert result.stats['generator_audit'] == {'keyword_misclassified': 0, 'nonkeyword_misclassified': 0}

    def test_empty_titles_are_skipped(self):
        corpus = Corpus([Article('d1', '', 'untitled'), Article('d2', 'heart attack', '')])
        cfg = LogGenConfig(num_keyword=5, num_nonkeyword=0, num_navigational=5, seed=2)
        logs = generate_logs(corpus, {}, cfg)

        keyword = [record for record in logs if record.kind == 'keyword']
        assert len(keyword) == 5
        assert all(record.clicked_ids == ['d2'] for record in keyword)

    def test_no_usable_title_is_a_typed_error(self):
        corpus = Corpus([Article('d1', '', 'untitled')])
        with pytest.raises(EmptyCorpusError):
            generate_logs(corpus, {}, LogGenConfig(num_keyword=5, num_nonkeyword=0, num_navigational=0))
        with pytest.raises(EmptyCorpusError):
            generate_logs(Corpus([Article('d1', 'Aspirin')]), {},
                          LogGenConfig(num_keyword=0, num_nonkeyword=3, num_navigational=0))

    def test_navigational_queries_accept_any_title(self):
        corpus = Corpus([Article('d1', '', 'untitled')])
        logs = generate_logs(corpus, {}, LogGenConfig(num_keyword=0, num_nonkeyword=0, num_navigational=4))
        assert len(logs) == 4

    def test_benchmark_skips_empty_titles(self):
        corpus = Corpus([Article('d1', ''), Article('d2', 'heart attack')])
        synonyms = {'heart': ['cardiac'], 'attack': ['infarction']}
        benchmark = generate_benchmark(corpus, synonyms, 2, seed=1)
        assert benchmark.source_ids == ['d2']


@pytest.mark.logkit
@pytest.mark.unit
class TestLogFiles(SimpleTestCase):
    """Test the click-log and synonym file formats"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, tmp_path):
        self.tmp_path = tmp_path

    def test_write_and_read_logs(self):
        records = [LogRecord('q1', 'insulin', False, (('D001', 2), ('D007', 1)), 'keyword'),
                   LogRecord('q2', 'smith j', True, (('D003', 1),))]
        path = self.tmp_path / 'logs.jsonl'
        write_logs(path, records)
        assert read_logs(path) == records

    def test_bad_click_count_reports_line(self):
        path = self.tmp_path / 'logs.jsonl'
        path.write_text(
            '{"qid":"q1","query":"a","navigational":false,"clicks":{"D001":1}}\n'
            '{"qid":"q2","query":"b","navigational":false,"clicks":{"D002":0}}\n',
            encoding='utf-8'
        )
        with pytest.raises(InvalidClickCountError) as excinfo:
            read_logs(path)
        assert excinfo.value.context['line'] == 2

    def test_invalid_json_reports_line(self):
        path = self.tmp_path / 'logs.jsonl'
        path.write_text('\n{"qid": \n', encoding='utf-8')
        with pytest.raises(InvalidRecordError) as excinfo:
            read_logs(path)
        assert excinfo.value.location().endswith(':2')

    def test_missing_field(self):
        path = self.tmp_path / 'logs.jsonl'
        path.write_text('{"qid":"q1","query":"a","clicks":{}}\n', encoding='utf-8')
        with pytest.raises(InvalidRecordError):
            read_logs(path)

    def test_navigational_must_be_boolean(self):
        path = self.tmp_path / 'logs.jsonl'
        path.write_text('{"qid":"q1","query":"a","navigational":"no","clicks":{}}\n', encoding='utf-8')
        with pytest.raises(InvalidRecordError):
            read_logs(path)

    def test_synonyms_must_be_string_lists(self):
        path = self.tmp_path / 'synonyms.json'
        path.write_text('{"term": "single"}', encoding='utf-8')
        with pytest.raises(InvalidRecordError):
            read_synonyms(path)


@pytest.mark.logkit
@pytest.mark.unit
class TestCuration(SimpleTestCase):
    """Test the navigational filter, keyword rule and pair extraction"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, tiny_corpus):
        self.corpus = tiny_corpus

    def test_filter_navigational_keeps_order(self):
        logs = [LogRecord('q1', 'a', False), LogRecord('q2', 'smith j', True), LogRecord('q3', 'b', False)]
        assert [record.qid for record in filter_navigational(logs)] == ['q1', 'q3']

    def test_keyword_rule_contiguous_phrase(self):
        rule = KeywordRule(self.corpus)
        assert rule('Insulin Resistance', ['D001'])
        assert not rule('resistance insulin', ['D001'])

    def test_keyword_rule_matches_abstract(self):
        assert KeywordRule(self.corpus)('blood pressure', ['D005'])

    def test_keyword_rule_single_word_always_holds(self):
        assert KeywordRule(self.corpus)('hyperglycaemia', ['D002'])

    def test_keyword_rule_needs_every_clicked_article(self):
        rule = KeywordRule(self.corpus)
        assert rule('insulin sensitivity', ['D007'])
        assert not rule('insulin sensitivity', ['D007', 'D001'])

    def test_keyword_rule_resolves_clicked_ids(self):
        with pytest.raises(UnresolvedArticleError):
            KeywordRule(self.corpus)('insulin', ['D404'])

    def test_is_keyword_query(self):
        record = LogRecord('q1', 'vitamin d', False, (('D004', 1),))
        assert is_keyword_query(record, self.corpus)

    def test_merge_by_query_unions_clicks(self):
        logs = [LogRecord('q1', 'a b', False, (('D002', 1),)), LogRecord('q2', 'c', False, (('D001', 1),)),
                LogRecord('q1', 'a b', False, (('D001', 1), ('D002', 3)))]
        merged = merge_by_query(logs)
        assert list(merged) == ['q1', 'q2']
        assert merged['q1'] == ('a b', ['D002', 'D001'])

    def test_extract_pairs_sums_and_sorts(self):
        logs = [LogRecord('q2', 'c', False, (('D001', 1),)),
                LogRecord('q1', 'a b', False, (('D002', 1),)),
                LogRecord('q1', 'a b', False, (('D002', 3), ('D001', 2)))]
        assert extract_pairs(logs) == [
            ClickPair('q1', 'a b', 'D001', 2),
            ClickPair('q1', 'a b', 'D002', 4),
            ClickPair('q2', 'c', 'D001', 1),
        ]

    def test_split_training_sets(self):
        logs = [LogRecord('q1', 'statin therapy', False, (('D002', 2),)),
                LogRecord('q2', 'cholesterol lowering drugs', False, (('D002', 1),)),
                LogRecord('q3', 'asthma', False, (('D003', 1),))]
        retriever_pairs, reranker_pairs = split_training_sets(logs, self.corpus)
        assert [pair.qid for pair in retriever_pairs] == ['q1', 'q2', 'q3']
        assert [pair.qid for pair in reranker_pairs] == ['q2']

    def test_classify_uses_union_of_clicks(self):
        logs = [LogRecord('q1', 'insulin sensitivity', False, (('D007', 1),)),
                LogRecord('q1', 'insulin sensitivity', False, (('D001', 1),))]
        assert classify_queries(logs, self.corpus) == {'q1': False}

    def test_keyword_rule_keeps_punctuation(self):
        corpus = Corpus([Article('d1', 'heart, damage after surgery', ''), Article('d2', 'Heart damage', '')])
        rule = KeywordRule(corpus)
        assert not rule('heart damage', ['d1'])
        assert rule('HEART   damage', ['d2'])

    def test_keyword_rule_needs_word_boundaries(self):
        corpus = Corpus([Article('d1', 'cardiomyopathy and heart failure', '')])
        rule = KeywordRule(corpus)
        assert not rule('myopathy and', ['d1'])
        assert not rule('heart fail', ['d1'])
        assert rule('heart failure', ['d1'])

    def test_keyword_rule_matches_within_one_field(self):
        corpus = Corpus([Article('d1', 'outcomes of acute stroke', 'care pathways after discharge')])
        rule = KeywordRule(corpus)
        assert not rule('stroke care', ['d1'])
        assert rule('care pathways', ['d1'])

    def test_one_word_queries_are_always_keyword(self):
        rng = np.random.default_rng(11)
        alphabet = list('abcdefghijklmnopqrstuvwxyz0123456789-,.')
        rule = KeywordRule(self.corpus)
        ids = list(self.corpus)
        for _ in range(300):
            word = ''.join(rng.choice(alphabet, size=int(rng.integers(1, 12))))
            clicked = [ids[i] for i in rng.choice(len(ids), size=int(rng.integers(1, 4)), replace=False)]
            assert rule(word, clicked)
            assert rule(f"  {word.upper()} ", clicked)

    def test_extract_pairs_matches_click_totals(self):
        rng = np.random.default_rng(5)
        ids = list(self.corpus)
        logs = []
        for _ in range(400):
            qid = f"q{int(rng.integers(20))}"
            chosen = rng.choice(len(ids), size=int(rng.integers(1, 4)), replace=False)
            logs.append(LogRecord(qid, f"text {qid}", False,
                                  tuple((ids[i], int(rng.integers(1, 9))) for i in chosen)))
        expected = {}
        for record in logs:
            for doc_id, count in record.clicks:
                expected[(record.qid, doc_id)] = expected.get((record.qid, doc_id), 0) + count

        pairs = extract_pairs(logs)

        assert {(pair.qid, pair.doc_id): pair.clicks for pair in pairs} == expected
        assert [(pair.qid, pair.doc_id) for pair in pairs] == sorted(expected)
        assert all(pair.query == f"text {pair.qid}" for pair in pairs)


@pytest.mark.logkit
class TestCurationOfGeneratedLogs(SimpleTestCase):
    """Test curation end to end on a generated log"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, generated_corpus):
        self.generated = generated_corpus
        self.corpus = Corpus(generated_corpus.articles)
        self.logs = generate_logs(self.corpus, generated_corpus.synonyms, LOG_CONFIG)

    def test_funnel(self):
        result = curate(self.logs, self.corpus)
        funnel = dict(result.stats['funnel'])

        assert funnel['log_records'] == LOG_CONFIG.total
        assert funnel['informational_records'] == LOG_CONFIG.total - 10
        assert result.stats['navigational_records'] == 10
        assert funnel['retriever_pairs'] == len(result.retriever_pairs)
        assert 0 < len(result.reranker_pairs) < len(result.retriever_pairs)

    def test_generated_kinds_match_rule(self):
        result = curate(self.logs, self.corpus)
        assert result.stats['generator_audit'] == {'keyword_misclassified': 0, 'nonkeyword_misclassified': 0}

    def test_reranker_pairs_come_from_nonkeyword_queries(self):
        result = curate(self.logs, self.corpus)
        nonkeyword = {record.qid for record in self.logs if record.kind == 'nonkeyword'}
        assert {pair.qid for pair in result.reranker_pairs} == nonkeyword
        assert {pair.qid for pair in result.retriever_pairs} >= nonkeyword

    def test_clicks_are_conserved(self):
        result = curate(self.logs, self.corpus)
        informational = filter_navigational(self.logs)
        assert result.stats['retriever_clicks'] == sum(count for r in informational for _, count in r.clicks)
