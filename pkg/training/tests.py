import math

import numpy as np
import pytest
import torch
from django.test import SimpleTestCase

from encoder.checkpoint import checkpoint_bytes
from encoder.network import BiEncoder
from medsearch.exceptions import (
    ConfigurationError,
    EmptyNegativesError,
    InsufficientBatchError,
    InvalidClickCountError,
    InvalidRecordError,
)
from retrieval.index import RankedList
from retrieval.services import encode_corpus
from training.losses import click_weights, reranker_loss, retriever_batch_loss
from training.services import (
    EpochBatcher,
    NegativeMiner,
    mine_local_negatives,
    sample_window,
    train_reranker,
    train_retriever,
    write_loss_log,
)
from training.types import (
    ClickPair,
    RerankInstance,
    RerankTrainConfig,
    RetrieverTrainConfig,
    group_by_query,
    read_instances,
    read_pairs,
    write_instances,
    write_pairs,
)


def tiny_pairs():
    """One click pair per tiny-corpus article, queried by its title."""
    titles = {
        'D001': 'insulin resistance obese', 'D002': 'statin cholesterol', 'D003': 'asthma children',
        'D004': 'vitamin d bone', 'D005': 'sleep apnea', 'D006': 'influenza vaccine',
        'D007': 'metformin insulin', 'D008': 'antibiotic resistance hospitals',
    }
    return [ClickPair(f"q{i}", query, doc_id, clicks=i)
            for i, (doc_id, query) in enumerate(sorted(titles.items()), start=1)]


@pytest.mark.training
@pytest.mark.unit
class TestLosses(SimpleTestCase):
    """Test click weighting and the contrastive losses"""

    def test_click_weights(self):
        weights = click_weights([1, 3, 7])
        assert weights.dtype == np.float64
        assert np.allclose(weights, [1 / 6, 1 / 3, 1 / 2])
        assert math.isclose(weights.sum(), 1.0)

    def test_click_weights_reject_zero(self):
        with pytest.raises(InvalidClickCountError):
            click_weights([2, 0])

    def test_identical_scores_give_log_batch(self):
        q = torch.zeros(4, 3, dtype=torch.float64)
        d = torch.ones(4, 3, dtype=torch.float64)
        for alpha in (0.0, 0.5, 1.0):
            loss = retriever_batch_loss(q, d, click_weights([1, 2, 3, 4]), alpha)
            assert loss.item() == pytest.approx(math.log(4))

    def test_dominant_diagonal_gives_small_loss(self):
        q = torch.eye(3, dtype=torch.float64) * 10
        loss = retriever_batch_loss(q, q.clone(), click_weights([1, 1, 1]), 0.5)
        assert loss.item() < 1e-6

    def test_directions_differ(self):
        q = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        d = torch.tensor([[2.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        weights = click_weights([1, 1])
        q2d = retriever_batch_loss(q, d, weights, 1.0).item()
        d2q = retriever_batch_loss(q, d, weights, 0.0).item()
        # every query scores (2, 0): row losses are log(1+e^-2) and log(1+e^2)
        assert q2d == pytest.approx(0.5 * (math.log1p(math.exp(-2)) + math.log1p(math.exp(2))))
        # document columns score (2, 2) and (0, 0): both are uniform
        assert d2q == pytest.approx(math.log(2))

    def test_single_instance_batch_rejected(self):
        with pytest.raises(InsufficientBatchError):
            retriever_batch_loss(torch.zeros(1, 3), torch.zeros(1, 3), [1.0], 0.5)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigurationError):
            retriever_batch_loss(torch.zeros(2, 3), torch.zeros(2, 3), [0.5, 0.6], 0.5)

    def test_alpha_outside_unit_interval(self):
        with pytest.raises(ConfigurationError):
            retriever_batch_loss(torch.zeros(2, 3), torch.zeros(2, 3), [0.5, 0.5], 1.5)

    def test_reranker_loss_uniform_scores(self):
        loss = reranker_loss(torch.tensor(0.3, dtype=torch.float64), torch.full((3,), 0.3, dtype=torch.float64))
        assert loss.item() == pytest.approx(math.log(4))

    def test_reranker_loss_rewards_positive(self):
        high = reranker_loss(torch.tensor(5.0), torch.tensor([0.0, 0.0])).item()
        low = reranker_loss(torch.tensor(-5.0), torch.tensor([0.0, 0.0])).item()
        assert high < math.log(3) < low

    def test_reranker_loss_needs_negatives(self):
        with pytest.raises(EmptyNegativesError):
            reranker_loss(torch.tensor(1.0), torch.tensor([]))

    def test_click_weights_always_sum_to_one(self):
        rng = np.random.default_rng(4)
        for _ in range(10_000):
            clicks = rng.integers(1, 1000, size=int(rng.integers(1, 65)))
            weights = click_weights(clicks.tolist())
            assert abs(math.fsum(weights) - 1.0) < 1e-12
            assert (weights > 0).all()

    def test_identical_embeddings_give_log_batch(self):
        rng = np.random.default_rng(6)
        for batch in (2, 4, 8, 32):
            row = torch.as_tensor(rng.standard_normal(5))
            q = row.repeat(batch, 1)
            weights = click_weights(rng.integers(1, 50, size=batch).tolist())
            for alpha in (0.0, 0.5, 0.8, 1.0):
                loss = retriever_batch_loss(q, q.clone(), weights, alpha)
                assert abs(loss.item() - math.log(batch)) < 1e-9

    def test_half_mix_is_symmetric_in_queries_and_documents(self):
        rng = np.random.default_rng(7)
        for batch in (2, 5, 16):
            q = torch.as_tensor(rng.standard_normal((batch, 6)))
            d = torch.as_tensor(rng.standard_normal((batch, 6)))
            weights = click_weights(rng.integers(1, 20, size=batch).tolist())
            forward = retriever_batch_loss(q, d, weights, 0.5).item()
            assert retriever_batch_loss(d, q, weights, 0.5).item() == pytest.approx(forward, abs=1e-12)
            # alpha and 1 - alpha swap roles too
            assert retriever_batch_loss(q, d, weights, 0.8).item() == pytest.approx(
                retriever_batch_loss(d, q, weights, 0.2).item(), abs=1e-12)

    @pytest.mark.gradcheck
    def test_embedding_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        q = torch.as_tensor(rng.standard_normal((4, 3)), dtype=torch.float64).requires_grad_()
        d = torch.as_tensor(rng.standard_normal((4, 3)), dtype=torch.float64).requires_grad_()
        weights = click_weights([1, 4, 2, 9])
        for alpha in (0.0, 0.8, 1.0):
            assert torch.autograd.gradcheck(lambda a, b: retriever_batch_loss(a, b, weights, alpha), (q, d))

    def test_reranker_uniform_negatives_give_log_group_size(self):
        for negatives in (1, 7, 31):
            loss = reranker_loss(torch.tensor(-1.5, dtype=torch.float64),
                                 torch.full((negatives,), -1.5, dtype=torch.float64))
            assert abs(loss.item() - math.log(negatives + 1)) < 1e-9

    def test_reranker_loss_known_values(self):
        confident = reranker_loss(torch.tensor(50.0, dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64))
        assert 0.0 <= confident.item() < 1e-20
        loss = reranker_loss(torch.tensor(1.0, dtype=torch.float64), torch.tensor([0.0, 0.0], dtype=torch.float64))
        assert loss.item() == pytest.approx(math.log1p(2 * math.exp(-1)))
        assert loss.item() == pytest.approx(0.55147, abs=1e-5)

    def test_reranker_loss_is_monotone(self):
        negs = torch.tensor([0.3, -0.2, 1.1], dtype=torch.float64)
        by_positive = [reranker_loss(torch.tensor(pos, dtype=torch.float64), negs).item()
                       for pos in np.linspace(-4, 4, 17)]
        assert all(later < earlier for earlier, later in zip(by_positive, by_positive[1:]))
        pos = torch.tensor(0.5, dtype=torch.float64)
        by_negative = [reranker_loss(pos, torch.tensor([value, -0.2, 1.1], dtype=torch.float64)).item()
                       for value in np.linspace(-4, 4, 17)]
        assert all(later > earlier for earlier, later in zip(by_negative, by_negative[1:]))


@pytest.mark.training
@pytest.mark.unit
class TestTrainingTypes(SimpleTestCase):
    """Test click pairs, instances and training configs"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, tmp_path):
        self.tmp_path = tmp_path

    def test_click_pair_rejects_zero_clicks(self):
        with pytest.raises(InvalidClickCountError):
            ClickPair('q1', 'insulin', 'D001', clicks=0)

    def test_instance_rejects_positive_among_negatives(self):
        with pytest.raises(InvalidRecordError):
            RerankInstance('q1', 'insulin', 'D001', ('D002', 'D001'))

    def test_retriever_config_needs_two_per_batch(self):
        with pytest.raises(InsufficientBatchError):
            RetrieverTrainConfig(batch_size=1)

    def test_rerank_config_window_order(self):
        with pytest.raises(ConfigurationError):
            RerankTrainConfig(window_start=5, window_end=2)

    def test_config_from_ini_strings(self):
        config = RetrieverTrainConfig.from_dict({'batch_size': '8', 'alpha': '0.25'})
        assert config.batch_size == 8
        assert config.alpha == 0.25

    def test_config_unknown_key(self):
        with pytest.raises(ConfigurationError):
            RerankTrainConfig.from_dict({'negatives': '3'})

    def test_pairs_file(self):
        path = self.tmp_path / 'pairs.jsonl'
        write_pairs(path, tiny_pairs())
        assert read_pairs(path) == tiny_pairs()

    def test_pairs_file_with_bad_clicks(self):
        path = self.tmp_path / 'pairs.jsonl'
        path.write_text('{"qid":"q1","query":"a","doc_id":"D001","clicks":0}\n', encoding='utf-8')
        with pytest.raises(InvalidClickCountError) as excinfo:
            read_pairs(path)
        assert excinfo.value.context['line'] == 1

    def test_instances_file(self):
        path = self.tmp_path / 'instances.jsonl'
        instances = [RerankInstance('q1', 'insulin', 'D001', ('D002', 'D003'), 2)]
        write_instances(path, instances)
        assert read_instances(path) == instances

    def test_instances_negs_must_be_list(self):
        path = self.tmp_path / 'instances.jsonl'
        path.write_text('{"qid":"q1","query":"a","pos":"D001","negs":"D002","clicks":1}\n', encoding='utf-8')
        with pytest.raises(InvalidRecordError):
            read_instances(path)

    def test_group_by_query_keeps_first_seen_order(self):
        pairs = [ClickPair('q2', 'b', 'D002'), ClickPair('q1', 'a', 'D001'), ClickPair('q2', 'b', 'D003')]
        groups = group_by_query(pairs)
        assert list(groups) == ['q2', 'q1']
        assert [pair.doc_id for pair in groups['q2']] == ['D002', 'D003']


@pytest.mark.training
@pytest.mark.unit
class TestEpochBatcher(SimpleTestCase):
    """Test seeded epoch batching"""

    def test_epoch_is_a_permutation_without_remainder(self):
        batches = iter(EpochBatcher(10, 4, seed=5, name='retriever'))
        first, second, third = next(batches), next(batches), next(batches)

        assert len(set(first.tolist()) | set(second.tolist())) == 8
        assert len(third) == 4

    def test_same_seed_same_batches(self):
        a = iter(EpochBatcher(10, 3, seed=5, name='retriever'))
        b = iter(EpochBatcher(10, 3, seed=5, name='retriever'))
        for _ in range(5):
            assert next(a).tolist() == next(b).tolist()

    def test_name_changes_order(self):
        a = [next(iter(EpochBatcher(50, 50, seed=5, name='retriever'))).tolist()]
        b = [next(iter(EpochBatcher(50, 50, seed=5, name='reranker'))).tolist()]
        assert a != b


@pytest.mark.training
class TestNegativeMining(SimpleTestCase):
    """Test window sampling and local negative mining"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, micro_config, tiny_corpus, tiny_vocab):
        self.config = micro_config
        self.corpus = tiny_corpus
        self.vocab = tiny_vocab

    def _ranking(self):
        return RankedList.from_scores('q1', [(f"D{i:03d}", 10.0 - i) for i in range(1, 11)])

    def test_window_excludes_clicked_and_keeps_rank_order(self):
        pair = ClickPair('q1', 'query', 'D001')
        rerank = RerankTrainConfig(num_negatives=2, window_start=2, window_end=5)

        instance = sample_window(self._ranking(), pair, {'D001', 'D003'}, rerank, seed=1)

        assert len(instance.negs) == 2
        assert set(instance.negs) <= {'D002', 'D004', 'D005'}
        assert list(instance.negs) == sorted(instance.negs)

    def test_window_smaller_than_m_takes_all(self):
        pair = ClickPair('q1', 'query', 'D001')
        rerank = RerankTrainConfig(num_negatives=5, window_start=9, window_end=20)
        instance = sample_window(self._ranking(), pair, {'D001'}, rerank, seed=1)
        assert instance.negs == ('D009', 'D010')

    def test_window_without_candidates_is_skipped(self):
        pair = ClickPair('q1', 'query', 'D002')
        rerank = RerankTrainConfig(num_negatives=2, window_start=2, window_end=2)
        assert sample_window(self._ranking(), pair, {'D002'}, rerank, seed=1) is None

    def test_sampling_is_seeded(self):
        pair = ClickPair('q1', 'query', 'D001')
        rerank = RerankTrainConfig(num_negatives=3, window_start=2, window_end=10)
        first = sample_window(self._ranking(), pair, {'D001'}, rerank, seed=4)
        second = sample_window(self._ranking(), pair, {'D001'}, rerank, seed=4)
        assert first == second

    def test_mine_local_negatives_with_encoded_corpus(self):
        retriever = BiEncoder(self.config)
        matrix = encode_corpus(retriever, self.vocab, self.corpus.articles())
        pair = ClickPair('q1', 'insulin resistance', 'D001')
        rerank = RerankTrainConfig(num_negatives=3, window_start=2, window_end=8)

        instance = mine_local_negatives(retriever, self.vocab, matrix, pair, rerank, seed=2, clicked={'D007'})

        assert instance.pos == 'D001'
        assert len(instance.negs) == 3
        assert not {'D001', 'D007'} & set(instance.negs)

    def test_miner_is_thread_count_independent(self):
        retriever = BiEncoder(self.config)
        matrix = encode_corpus(retriever, self.vocab, self.corpus.articles())
        pairs = tiny_pairs() + [ClickPair('q1', 'insulin resistance obese', 'D007')]
        rerank = RerankTrainConfig(num_negatives=2, window_start=2, window_end=6)

        single = NegativeMiner(retriever, self.vocab, matrix, rerank, seed=2, threads=1).mine(pairs)
        pooled = NegativeMiner(retriever, self.vocab, matrix, rerank, seed=2, threads=3).mine(pairs)

        assert single == pooled
        q1 = [instance for instance in single if instance.qid == 'q1']
        assert all(not {'D001', 'D007'} & set(instance.negs) for instance in q1)


@pytest.mark.training
class TestTrainingLoops(SimpleTestCase):
    """Test the retriever and re-ranker optimisation loops"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, micro_config, tiny_corpus, tiny_vocab, tmp_path):
        self.config = micro_config
        self.corpus = tiny_corpus
        self.vocab = tiny_vocab
        self.tmp_path = tmp_path

    def test_retriever_steps_and_loss_log(self):
        config = RetrieverTrainConfig(batch_size=4, steps=3, warmup_steps=1, log_every=1, seed=1)
        result = train_retriever(tiny_pairs(), self.corpus, self.vocab, self.config, config)

        assert [step for step, _, _ in result.losses] == [1, 2, 3]
        assert all(math.isfinite(loss) for _, _, loss in result.losses)
        assert result.initial_eval_loss is None

        path = write_loss_log(self.tmp_path / 'loss.csv', result.losses)
        lines = path.read_text(encoding='utf-8').splitlines()
        assert lines[0] == 'step,lr,loss'
        assert len(lines) == 4

    def test_retriever_training_is_reproducible(self):
        config = RetrieverTrainConfig(batch_size=4, steps=2, warmup_steps=0, seed=3)
        first = train_retriever(tiny_pairs(), self.corpus, self.vocab, self.config, config)
        second = train_retriever(tiny_pairs(), self.corpus, self.vocab, self.config, config)
        assert checkpoint_bytes(first.model, 'retriever') == checkpoint_bytes(second.model, 'retriever')

    def test_gradient_accumulation_counts_micro_batches(self):
        config = RetrieverTrainConfig(batch_size=2, grad_accumulation=2, steps=2, warmup_steps=0, seed=3)
        result = train_retriever(tiny_pairs(), self.corpus, self.vocab, self.config, config)
        assert len(result.losses) == 2

    def test_retriever_needs_a_full_batch(self):
        config = RetrieverTrainConfig(batch_size=4, steps=1)
        with pytest.raises(InsufficientBatchError):
            train_retriever(tiny_pairs()[:3], self.corpus, self.vocab, self.config, config)

    def test_periodic_checkpoints(self):
        config = RetrieverTrainConfig(batch_size=4, steps=2, warmup_steps=0, checkpoint_every=1, seed=1)
        result = train_retriever(tiny_pairs(), self.corpus, self.vocab, self.config, config, out_dir=self.tmp_path)
        assert [path.name for path in result.checkpoints] == ['retriever-step000001.mckp', 'retriever-step000002.mckp']
        assert all(path.exists() for path in result.checkpoints)

    def test_checkpoints_are_on_by_default(self):
        assert RetrieverTrainConfig().checkpoint_every > 0
        assert RerankTrainConfig().checkpoint_every > 0
        with pytest.raises(ConfigurationError):
            RetrieverTrainConfig(checkpoint_every=-1)

    def test_zero_interval_disables_checkpoints(self):
        config = RetrieverTrainConfig(batch_size=4, steps=2, warmup_steps=0, checkpoint_every=0, seed=1)
        result = train_retriever(tiny_pairs(), self.corpus, self.vocab, self.config, config, out_dir=self.tmp_path)
        assert result.checkpoints == []
        assert not (self.tmp_path / 'checkpoints').exists()

    def test_reranker_initial_eval_loss_near_uniform(self):
        instances = [RerankInstance(pair.qid, pair.query, pair.doc_id, ('D002', 'D005') if pair.doc_id != 'D002'
                                    else ('D001', 'D005'), pair.clicks) for pair in tiny_pairs()
                     if pair.doc_id != 'D005']
        config = RerankTrainConfig(num_negatives=2, batch_size=2, steps=2, warmup_steps=0, seed=1)

        result = train_reranker(instances, self.corpus, self.vocab, self.config, config, eval_items=instances)

        assert abs(result.initial_eval_loss - math.log(3)) < 0.2
        assert math.isfinite(result.final_eval_loss)
        assert len(result.losses) == 2

    @pytest.mark.slow
    def test_retriever_fits_training_pairs(self):
        config = RetrieverTrainConfig(batch_size=8, steps=40, warmup_steps=2, learning_rate=1e-3, seed=1)
        result = train_retriever(tiny_pairs(), self.corpus, self.vocab, self.config, config,
                                 eval_items=tiny_pairs())
        assert result.initial_eval_loss == pytest.approx(math.log(8), abs=0.1)
        assert result.final_eval_loss < result.initial_eval_loss

    @pytest.mark.slow
    def test_reranker_held_out_loss_falls(self):
        ids = sorted(self.corpus)

        def instance(pair, query, qid):
            at = ids.index(pair.doc_id)
            negs = (ids[(at + 3) % len(ids)], ids[(at + 5) % len(ids)])
            return RerankInstance(qid, query, pair.doc_id, negs, pair.clicks)

        train = [instance(pair, pair.query, pair.qid) for pair in tiny_pairs()]
        # same judgments, but asked with the full article titles
        held_out = [instance(pair, self.corpus[pair.doc_id].title, pair.qid + 'h') for pair in tiny_pairs()]
        config = RerankTrainConfig(num_negatives=2, batch_size=4, steps=60, warmup_steps=5,
                                   learning_rate=2e-3, seed=1)

        result = train_reranker(train, self.corpus, self.vocab, self.config, config, eval_items=held_out)

        assert result.initial_eval_loss == pytest.approx(math.log(3), abs=0.2)
        assert result.final_eval_loss < result.initial_eval_loss
