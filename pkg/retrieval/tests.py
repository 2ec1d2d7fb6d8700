import numpy as np
import pytest
from django.test import SimpleTestCase

from encoder.network import BiEncoder, CrossEncoder
from medsearch.exceptions import (
    ConfigurationError,
    DimensionMismatchError,
    DuplicateArticleError,
    IndexFormatError,
    NumericFailureError,
    UnresolvedArticleError,
)
from retrieval.index import (
    EmbeddingMatrix,
    RankedList,
    full_ranking,
    index_bytes,
    load_index,
    mips_search,
    save_index,
)
from retrieval.services import (
    CorpusEncoder,
    Reranker,
    dense_search,
    encode_corpus,
    encode_queries,
    rerank,
    similar_articles,
    two_stage_search,
)


def brute_force(matrix, q, k):
    scored = [(article_id, float(np.dot(matrix.values[row].astype(np.float64), q)))
              for row, article_id in enumerate(matrix.ids)]
    return sorted(scored, key=lambda item: (-item[1], item[0]))[:k]


@pytest.mark.retrieval
@pytest.mark.unit
class TestRankedList(SimpleTestCase):
    """Test ranked-list ordering invariants"""

    def test_from_scores_orders_by_score_then_id(self):
        ranked = RankedList.from_scores('q1', [('b', 1.0), ('a', 1.0), ('c', 2.0)])
        assert ranked.doc_ids == ['c', 'a', 'b']

    def test_from_scores_truncates(self):
        ranked = RankedList.from_scores('q1', [('b', 1.0), ('a', 1.0), ('c', 2.0)], k=2)
        assert len(ranked) == 2

    def test_rejects_repeated_ids(self):
        with pytest.raises(ConfigurationError):
            RankedList('q1', (('a', 2.0), ('a', 1.0)))

    def test_rejects_unordered_entries(self):
        with pytest.raises(ConfigurationError):
            RankedList('q1', (('a', 1.0), ('b', 2.0)))
        with pytest.raises(ConfigurationError):
            RankedList('q1', (('b', 1.0), ('a', 1.0)))


@pytest.mark.retrieval
@pytest.mark.unit
class TestMipsSearch(SimpleTestCase):
    """Test exact inner-product search against a brute-force ranking"""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.ids = tuple(f"D{i:04d}" for i in range(200))
        self.matrix = EmbeddingMatrix(self.ids, rng.standard_normal((200, 8)).astype(np.float32))
        self.queries = rng.standard_normal((5, 8))

    def test_matches_brute_force(self):
        for q in self.queries:
            ranked = mips_search(self.matrix, q, 15)
            expected = brute_force(self.matrix, q, 15)
            assert ranked.doc_ids == [article_id for article_id, _ in expected]
            assert np.allclose([score for _, score in ranked.entries], [score for _, score in expected])

    def test_random_instances_match_brute_force(self):
        rng = np.random.default_rng(8)
        for trial in range(500):
            n, dim = int(rng.integers(1, 60)), int(rng.integers(1, 9))
            # every other instance uses small integers so exact ties occur
            if trial % 2:
                values, q = rng.integers(-2, 3, size=(n, dim)), rng.integers(-2, 3, size=dim).astype(np.float64)
            else:
                values, q = rng.standard_normal((n, dim)), rng.standard_normal(dim)
            ids = tuple(f"D{i:03d}" for i in rng.permutation(n))
            matrix = EmbeddingMatrix(ids, values.astype(np.float32))
            for k in (1, 10, n):
                expected = [article_id for article_id, _ in brute_force(matrix, q, k)]
                assert mips_search(matrix, q, k).doc_ids == expected
                for scale in ((0.25, 4.0, 3.0) if trial % 2 else (0.25, 4.0)):
                    assert mips_search(matrix, scale * q, k).doc_ids == expected

    def test_ties_break_by_ascending_id(self):
        values = np.array([[1.0, 0.0], [1.0, 0.0], [0.5, 0.0], [1.0, 0.0]], dtype=np.float32)
        matrix = EmbeddingMatrix(('c', 'a', 'z', 'b'), values)
        assert mips_search(matrix, [1.0, 0.0], 3).doc_ids == ['a', 'b', 'c']

    def test_ties_at_the_cutoff(self):
        values = np.array([[2.0], [1.0], [1.0], [1.0]], dtype=np.float32)
        matrix = EmbeddingMatrix(('d', 'c', 'b', 'a'), values)
        assert mips_search(matrix, [1.0], 2).doc_ids == ['d', 'a']

    def test_k_larger_than_corpus(self):
        assert len(mips_search(self.matrix, self.queries[0], 500)) == 200

    def test_full_ranking_covers_every_article(self):
        ranked = full_ranking(self.matrix, self.queries[1], 'q1')
        assert sorted(ranked.doc_ids) == sorted(self.ids)
        assert ranked.qid == 'q1'

    def test_empty_matrix(self):
        assert len(mips_search(EmbeddingMatrix.empty(8), self.queries[0], 5)) == 0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            mips_search(self.matrix, np.zeros(3), 5)

    def test_k_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            mips_search(self.matrix, self.queries[0], 0)


@pytest.mark.retrieval
@pytest.mark.unit
class TestEmbeddingIndex(SimpleTestCase):
    """Test the embedding matrix and the MEDV index file"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, tmp_path):
        self.tmp_path = tmp_path

    def _matrix(self):
        values = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
        return EmbeddingMatrix(('D1', 'D2', 'Dé'), values)

    def test_matrix_copies_and_freezes_values(self):
        values = np.ones((2, 3), dtype=np.float32)
        matrix = EmbeddingMatrix(('a', 'b'), values)
        values[0, 0] = 5.0
        assert matrix.values[0, 0] == 1.0
        assert not matrix.values.flags.writeable

    def test_duplicate_ids(self):
        with pytest.raises(DuplicateArticleError):
            EmbeddingMatrix(('a', 'a'), np.zeros((2, 3)))

    def test_non_finite_values(self):
        with pytest.raises(NumericFailureError):
            EmbeddingMatrix(('a',), np.array([[np.inf, 0.0]]))

    def test_row_count_must_match_ids(self):
        with pytest.raises(DimensionMismatchError):
            EmbeddingMatrix(('a',), np.zeros((2, 3)))

    def test_save_and_load(self):
        matrix = self._matrix()
        path = save_index(matrix, self.tmp_path / 'corpus.medv')

        loaded = load_index(path)

        assert loaded.ids == matrix.ids
        assert np.array_equal(loaded.values, matrix.values)
        assert path.read_bytes()[:4] == b'MEDV'

    def test_bad_magic(self):
        path = self.tmp_path / 'bad.medv'
        path.write_bytes(b'NOPE' + index_bytes(self._matrix())[4:])
        with pytest.raises(IndexFormatError):
            load_index(path)

    def test_truncated_payload(self):
        path = self.tmp_path / 'short.medv'
        path.write_bytes(index_bytes(self._matrix())[:-4])
        with pytest.raises(IndexFormatError):
            load_index(path)

    def test_truncated_header(self):
        path = self.tmp_path / 'header.medv'
        path.write_bytes(b'MEDV\x01')
        with pytest.raises(IndexFormatError):
            load_index(path)

    def test_missing_index(self):
        with pytest.raises(IndexFormatError):
            load_index(self.tmp_path / 'absent.medv')

    def test_empty_index(self):
        path = save_index(EmbeddingMatrix.empty(4), self.tmp_path / 'empty.medv')
        loaded = load_index(path)
        assert loaded.size == 0
        assert loaded.dim == 4


@pytest.mark.retrieval
class TestCorpusEncoding(SimpleTestCase):
    """Test offline encoding, resumable chunks and dense search"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, micro_config, tiny_corpus, tiny_vocab, tmp_path):
        self.config = micro_config
        self.corpus = tiny_corpus
        self.vocab = tiny_vocab
        self.tmp_path = tmp_path
        self.retriever = BiEncoder(micro_config)

    def test_one_row_per_article_in_order(self):
        matrix = encode_corpus(self.retriever, self.vocab, self.corpus.articles())
        assert matrix.ids == tuple(self.corpus)
        assert matrix.dim == self.config.hidden_size

    def test_chunking_and_threads_do_not_change_rows(self):
        whole = encode_corpus(self.retriever, self.vocab, self.corpus.articles(), chunk_size=100)
        chunked = encode_corpus(self.retriever, self.vocab, self.corpus.articles(), chunk_size=3, threads=2)
        assert chunked.ids == whole.ids
        assert np.array_equal(chunked.values, whole.values)

    def test_duplicate_articles_rejected(self):
        articles = self.corpus.articles()
        with pytest.raises(DuplicateArticleError):
            encode_corpus(self.retriever, self.vocab, articles + articles[:1])

    def test_work_dir_chunks_are_reused(self):
        work_dir = self.tmp_path / 'chunks'
        first = CorpusEncoder(self.retriever, self.vocab, chunk_size=3, work_dir=work_dir)
        matrix = first.encode(self.corpus.articles())
        assert len(list(work_dir.glob('chunk-*.medv'))) == 3

        second = CorpusEncoder(self.retriever, self.vocab, chunk_size=3, work_dir=work_dir)
        resumed = second.encode(self.corpus.articles())

        assert second.reused_chunks == 3
        assert np.array_equal(resumed.values, matrix.values)

    def test_reused_chunks_counted_across_threads(self):
        work_dir = self.tmp_path / 'chunks'
        articles = self.corpus.articles()
        CorpusEncoder(self.retriever, self.vocab, chunk_size=1, work_dir=work_dir).encode(articles[:5])

        encoder = CorpusEncoder(self.retriever, self.vocab, chunk_size=1, work_dir=work_dir, threads=4)
        matrix = encoder.encode(articles)

        assert encoder.reused_chunks == 5
        assert matrix.ids == tuple(article.id for article in articles)
        assert len(list(work_dir.glob('chunk-*.medv'))) == 8

    def test_chunks_for_other_articles_are_re_encoded(self):
        work_dir = self.tmp_path / 'chunks'
        CorpusEncoder(self.retriever, self.vocab, chunk_size=4, work_dir=work_dir).encode(self.corpus.articles())

        reordered = list(reversed(self.corpus.articles()))
        encoder = CorpusEncoder(self.retriever, self.vocab, chunk_size=4, work_dir=work_dir)
        matrix = encoder.encode(reordered)

        assert encoder.reused_chunks == 0
        assert matrix.ids == tuple(article.id for article in reordered)

    def test_unreadable_chunk_is_replaced(self):
        work_dir = self.tmp_path / 'chunks'
        work_dir.mkdir()
        (work_dir / 'chunk-000000.medv').write_bytes(b'garbage')
        matrix = CorpusEncoder(self.retriever, self.vocab, chunk_size=100, work_dir=work_dir).encode(
            self.corpus.articles())
        assert matrix.size == len(self.corpus)
        assert load_index(work_dir / 'chunk-000000.medv').ids == matrix.ids

    def test_invalid_chunk_size(self):
        with pytest.raises(ConfigurationError):
            CorpusEncoder(self.retriever, self.vocab, chunk_size=0)

    def test_dense_search_matches_mips_over_query_vector(self):
        matrix = encode_corpus(self.retriever, self.vocab, self.corpus.articles())
        q_vec = encode_queries(self.retriever, self.vocab, ['insulin resistance'])[0]

        ranked = dense_search(self.retriever, self.vocab, matrix, 'insulin resistance', 5, qid='q1')

        assert ranked.entries == mips_search(matrix, q_vec, 5, 'q1').entries

    def test_similar_articles_excludes_itself(self):
        matrix = encode_corpus(self.retriever, self.vocab, self.corpus.articles())
        ranked = similar_articles(matrix, 'D001', 3)
        assert len(ranked) == 3
        assert 'D001' not in ranked.doc_ids

    def test_similar_articles_unknown_id(self):
        matrix = encode_corpus(self.retriever, self.vocab, self.corpus.articles())
        with pytest.raises(ConfigurationError):
            similar_articles(matrix, 'D999', 3)


@pytest.mark.retrieval
class TestReranking(SimpleTestCase):
    """Test cross-encoder re-ranking and two-stage search"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, micro_config, tiny_corpus, tiny_vocab):
        self.config = micro_config
        self.corpus = tiny_corpus
        self.vocab = tiny_vocab
        self.retriever = BiEncoder(micro_config)
        self.reranker = CrossEncoder(micro_config)

    def test_rerank_keeps_candidate_set(self):
        candidates = RankedList.from_scores('q1', [('D003', 3.0), ('D001', 2.0), ('D007', 1.0)])

        ranked = rerank(self.reranker, self.vocab, 'insulin', candidates, self.corpus)

        assert ranked.qid == 'q1'
        assert sorted(ranked.doc_ids) == ['D001', 'D003', 'D007']

    def test_rerank_orders_by_cross_score(self):
        candidates = RankedList.from_scores('q1', [('D003', 3.0), ('D001', 2.0), ('D007', 1.0)])
        reranker = Reranker(self.reranker, self.vocab, self.corpus)

        ranked = reranker.rerank('insulin', candidates)
        scores = dict(zip(candidates.doc_ids, reranker.scores('insulin', candidates.doc_ids)))

        assert [score for _, score in ranked.entries] == sorted(scores.values(), reverse=True)

    def test_rerank_unknown_article(self):
        candidates = RankedList.from_scores('q1', [('D404', 1.0)])
        with pytest.raises(UnresolvedArticleError):
            rerank(self.reranker, self.vocab, 'insulin', candidates, self.corpus)

    def test_two_stage_search_reorders_first_stage_set(self):
        matrix = encode_corpus(self.retriever, self.vocab, self.corpus.articles())
        first_stage = dense_search(self.retriever, self.vocab, matrix, 'asthma children', 4)

        ranked = two_stage_search('asthma children', 4, self.retriever, self.reranker,
                                  matrix, self.corpus, self.vocab)

        assert len(ranked) == 4
        assert set(ranked.doc_ids) == set(first_stage.doc_ids)
