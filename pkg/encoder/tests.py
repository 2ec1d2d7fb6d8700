import json
import math
import struct

import pytest
import torch
from django.test import SimpleTestCase

from encoder.checkpoint import checkpoint_bytes, load_checkpoint, load_kind, save_checkpoint
from encoder.gradcheck import max_relative_error, relative_error
from encoder.network import BiEncoder, CrossEncoder, EncoderConfig, build_model, parameter_count
from encoder.optim import OptimizerState, adam_step, learning_rate_at
from encoder.services import (
    backward,
    cross_score,
    cross_score_batch,
    encode_batch,
    encode_document,
    encode_query,
    encode_text,
)
from encoder.tokenization import cross_layout, document_token_ids, tokenize, tokenize_document
from encoder.vocab import Vocabulary, build_vocab, split_words
from medsearch.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CLS_ID, PAD_ID, SEP_ID, SPECIAL_TOKENS, UNK_ID
from medsearch.exceptions import (
    BackwardWithoutForwardError,
    CheckpointFormatError,
    ConfigurationError,
    EmptyCorpusError,
    MissingPathError,
    NumericFailureError,
    ShapeMismatchError,
    VocabularyFormatError,
)
from training.losses import click_weights, reranker_loss, retriever_batch_loss


@pytest.mark.encoder
@pytest.mark.unit
class TestVocabulary(SimpleTestCase):
    """Test vocabulary construction and the vocab.txt format"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, tiny_corpus, tmp_path):
        self.corpus = tiny_corpus
        self.tmp_path = tmp_path

    def test_specials_come_first(self):
        vocab = build_vocab(self.corpus.articles(), 100)
        assert tuple(vocab.tokens[:4]) == SPECIAL_TOKENS

    def test_frequency_order_with_lexicographic_ties(self):
        vocab = build_vocab(self.corpus.articles(), 100)
        # 'and' appears six times; 'in' and 'insulin' four times each
        assert vocab.tokens[4:7] == ['and', 'in', 'insulin']
        assert vocab.token(7) == 'resistance'

    def test_max_size_caps_including_specials(self):
        vocab = build_vocab(self.corpus.articles(), 6)
        assert len(vocab) == 6

    def test_extra_texts_add_query_words(self):
        vocab = build_vocab(self.corpus.articles(), 200, extra_texts=['hyperglycaemia'])
        assert 'hyperglycaemia' in vocab

    def test_empty_corpus_rejected(self):
        with pytest.raises(EmptyCorpusError):
            build_vocab([], 100)

    def test_max_size_must_exceed_specials(self):
        with pytest.raises(ConfigurationError):
            build_vocab(self.corpus.articles(), 4)

    def test_unknown_words_map_to_unk(self):
        vocab = build_vocab(self.corpus.articles(), 100)
        assert vocab.encode_text('Insulin zzzq') == [vocab.token_id('insulin'), UNK_ID]

    def test_split_words_lowercases_and_drops_punctuation(self):
        assert split_words('Vitamin-D, and BONE.') == ['vitamin', 'd', 'and', 'bone']

    def test_save_and_load(self):
        vocab = build_vocab(self.corpus.articles(), 100)
        path = self.tmp_path / 'vocab.txt'
        vocab.save(path)

        assert Vocabulary.load(path) == vocab
        assert path.read_text(encoding='utf-8').splitlines()[:4] == list(SPECIAL_TOKENS)

    def test_load_rejects_duplicate_tokens(self):
        path = self.tmp_path / 'vocab.txt'
        path.write_text('\n'.join(list(SPECIAL_TOKENS) + ['alpha', 'alpha']) + '\n', encoding='utf-8')
        with pytest.raises(VocabularyFormatError):
            Vocabulary.load(path)

    def test_load_rejects_whitespace_tokens(self):
        path = self.tmp_path / 'vocab.txt'
        path.write_text('\n'.join(list(SPECIAL_TOKENS) + ['two words']) + '\n', encoding='utf-8')
        with pytest.raises(VocabularyFormatError):
            Vocabulary.load(path)

    def test_missing_file(self):
        with pytest.raises(MissingPathError):
            Vocabulary.load(self.tmp_path / 'absent.txt')


@pytest.mark.encoder
@pytest.mark.unit
class TestTokenization(SimpleTestCase):
    """Test the query, document and cross-encoder layouts"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, tiny_vocab):
        self.vocab = tiny_vocab

    def test_query_layout(self):
        sequence = tokenize(self.vocab, 'insulin resistance', 8)

        assert sequence.length == 4
        assert sequence.ids[0] == CLS_ID
        assert sequence.ids[3] == SEP_ID
        assert sequence.ids[4:] == (PAD_ID,) * 4
        assert sequence.content_ids == (self.vocab.token_id('insulin'), self.vocab.token_id('resistance'))

    def test_query_truncation_keeps_sep(self):
        sequence = tokenize(self.vocab, 'insulin resistance in obese adults', 4)

        assert sequence.length == 4
        assert sequence.ids[-1] == SEP_ID
        assert len(sequence.content_ids) == 2

    def test_empty_text_is_cls_sep(self):
        sequence = tokenize(self.vocab, '', 5)
        assert sequence.ids[:2] == (CLS_ID, SEP_ID)
        assert sequence.length == 2

    def test_document_truncates_abstract_first(self):
        title = 'statin therapy cholesterol'
        abstract = 'statins lower cholesterol and cardiac events'
        sequence = tokenize_document(self.vocab, title, abstract, 7)

        ids = self.vocab.ids
        expected = [CLS_ID] + ids(split_words(title)) + [SEP_ID] + ids(['statins']) + [SEP_ID]
        assert list(sequence.ids) == expected

    def test_cross_layout_truncates_document_tail(self):
        query = tokenize(self.vocab, 'asthma children', 12)
        d_tokens = document_token_ids(self.vocab, 'asthma exacerbation in children', 'inhaled steroids')
        sequence = cross_layout(query, d_tokens, 8)

        assert sequence.length == 8
        assert list(sequence.ids[1:3]) == list(query.content_ids)
        assert sequence.ids[3] == SEP_ID
        assert list(sequence.ids[4:7]) == d_tokens[:3]
        assert sequence.ids[7] == SEP_ID

    def test_max_len_below_three_rejected(self):
        with pytest.raises(ConfigurationError):
            tokenize(self.vocab, 'insulin', 2)


@pytest.mark.encoder
class TestEncoderNetwork(SimpleTestCase):
    """Test encoder construction, initialization and invariances"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, micro_config, tiny_vocab):
        self.config = micro_config
        self.vocab = tiny_vocab

    def test_config_rejects_indivisible_heads(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(hidden_size=10, num_heads=3)

    def test_config_rejects_unknown_keys(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig.from_dict({'hidden_size': '16', 'dropout': '0.1'})

    def test_from_dict_casts_strings(self):
        config = EncoderConfig.from_dict({'hidden_size': '16', 'num_heads': '2'})
        assert config.hidden_size == 16
        assert config.num_heads == 2

    def test_seeded_init_is_reproducible(self):
        first = BiEncoder(self.config)
        second = BiEncoder(self.config)
        for (name, a), (_, b) in zip(first.named_parameters(), second.named_parameters()):
            assert torch.equal(a, b), name

    def test_seed_changes_weights(self):
        first = BiEncoder(self.config)
        other = BiEncoder(EncoderConfig(**{**self.config.to_dict(), 'seed': 8}))
        assert not torch.equal(first.query_encoder.token_embeddings.weight,
                               other.query_encoder.token_embeddings.weight)

    def test_query_and_document_encoders_differ(self):
        model = BiEncoder(self.config)
        assert not torch.equal(model.query_encoder.token_embeddings.weight,
                               model.doc_encoder.token_embeddings.weight)

    def test_build_model_kinds(self):
        assert isinstance(build_model('retriever', self.config), BiEncoder)
        assert isinstance(build_model('reranker', self.config), CrossEncoder)
        with pytest.raises(ConfigurationError):
            build_model('ranker', self.config)

    def test_parameter_count_positive(self):
        model = CrossEncoder(self.config)
        assert parameter_count(model) == sum(p.numel() for p in model.parameters())

    def test_query_vector_ignores_padding(self):
        model = BiEncoder(self.config)
        sequence = tokenize(self.vocab, 'insulin resistance', 6)
        with torch.no_grad():
            short = encode_query(model, sequence)
            padded = encode_query(model, sequence.padded(6))
        assert short.shape == (self.config.hidden_size,)
        assert torch.equal(short, padded)

    def test_batch_row_matches_single_encoding(self):
        model = BiEncoder(self.config)
        first = tokenize(self.vocab, 'insulin', 12)
        second = tokenize(self.vocab, 'statin therapy and cholesterol', 12)
        with torch.no_grad():
            batch = encode_batch(model.query_encoder, [first, second])
            single = encode_query(model, first)
        assert torch.allclose(batch[0], single, atol=1e-5)

    def test_document_and_text_encoding(self):
        model = BiEncoder(self.config)
        with torch.no_grad():
            doc = encode_document(model, self.vocab, 'insulin resistance', 'glucose uptake')
            text = encode_text(model, self.vocab, 'insulin resistance')
        assert doc.shape == text.shape == (self.config.hidden_size,)
        assert not torch.equal(doc, text)

    def test_cross_score_is_scalar_and_matches_batch(self):
        model = CrossEncoder(self.config)
        query = tokenize(self.vocab, 'asthma children', self.config.max_query_length)
        d_tokens = document_token_ids(self.vocab, 'asthma exacerbation in children', 'inhaled steroids')
        with torch.no_grad():
            score = cross_score(model, query, d_tokens)
            batch = cross_score_batch(model, [cross_layout(query, d_tokens, self.config.max_cross_length)])
        assert score.dim() == 0
        assert torch.allclose(score, batch[0], atol=1e-6)

    def test_non_finite_weights_raise_numeric_failure(self):
        model = BiEncoder(self.config)
        with torch.no_grad():
            model.query_encoder.token_embeddings.weight.fill_(float('nan'))
            with pytest.raises(NumericFailureError):
                encode_text(model, self.vocab, 'insulin')


@pytest.mark.encoder
class TestBackwardAndOptimizer(SimpleTestCase):
    """Test gradient extraction and the scheduled Adam step"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, micro_config, tiny_vocab):
        self.config = micro_config
        self.vocab = tiny_vocab

    def _query_loss(self, model):
        sequence = tokenize(self.vocab, 'insulin resistance', 12)
        return encode_query(model, sequence).pow(2).sum()

    def test_backward_without_forward(self):
        model = BiEncoder(self.config)
        with pytest.raises(BackwardWithoutForwardError):
            backward(model, torch.tensor(1.0))

    def test_constant_zero_loss_gives_zero_gradients(self):
        model = CrossEncoder(self.config)
        for loss in (torch.tensor(0.0), 0.0 * self._query_loss(BiEncoder(self.config)).detach()):
            grads = backward(model, loss)
            assert set(grads) == {name for name, _ in model.named_parameters()}
            assert all(not grad.any() for grad in grads.values())

    def test_zero_loss_through_the_graph(self):
        model = BiEncoder(self.config)
        grads = backward(model, 0.0 * self._query_loss(model))
        assert all(not grad.any() for grad in grads.values())

    def test_linear_loss_gives_all_ones(self):
        model = CrossEncoder(self.config)
        grads = backward(model, model.head.weight.sum())

        assert torch.equal(grads['head.weight'], torch.ones_like(model.head.weight))
        assert all(not grad.any() for name, grad in grads.items() if name != 'head.weight')

    def test_backward_twice_on_one_loss(self):
        model = BiEncoder(self.config)
        loss = self._query_loss(model)
        backward(model, loss)
        with pytest.raises(BackwardWithoutForwardError):
            backward(model, loss)

    def test_unreached_parameters_get_zero_gradients(self):
        model = BiEncoder(self.config)
        grads = backward(model, self._query_loss(model))

        assert set(grads) == {name for name, _ in model.named_parameters()}
        assert all(not grad.any() for name, grad in grads.items() if name.startswith('doc_encoder.'))
        assert grads['query_encoder.token_embeddings.weight'].abs().sum() > 0

    def test_learning_rate_schedule(self):
        assert learning_rate_at(1.0, 0, 10, 100) == 0.0
        assert learning_rate_at(1.0, 5, 10, 100) == pytest.approx(0.5)
        assert learning_rate_at(1.0, 10, 10, 100) == pytest.approx(1.0)
        assert learning_rate_at(1.0, 55, 10, 100) == pytest.approx(0.5)
        assert learning_rate_at(1.0, 100, 10, 100) == pytest.approx(0.0, abs=1e-12)

    def test_no_warmup_starts_at_cosine(self):
        expected = 0.5 * (1.0 + math.cos(math.pi * 0.1))
        assert learning_rate_at(1.0, 1, 0, 10) == pytest.approx(expected)

    def test_first_adam_step_moves_each_entry_by_lr(self):
        model = CrossEncoder(self.config)
        before = {name: p.detach().clone() for name, p in model.named_parameters()}
        grads = {name: torch.ones_like(p) for name, p in model.named_parameters()}
        state = OptimizerState(learning_rate=0.1, warmup_steps=0, total_steps=10)

        adam_step(model, grads, state)

        lr = learning_rate_at(0.1, 1, 0, 10)
        assert state.step == 1
        for name, param in model.named_parameters():
            assert torch.allclose(before[name] - param.detach(), torch.full_like(param, lr), atol=1e-6), name
        first, second = state.moments(model)['head.bias']
        assert torch.allclose(first, torch.full_like(first, 0.1))
        assert torch.allclose(second, torch.full_like(second, 0.001))

    def test_adam_with_zero_gradient_leaves_parameters(self):
        model = CrossEncoder(self.config)
        before = {name: p.detach().clone() for name, p in model.named_parameters()}
        grads = {name: torch.zeros_like(p) for name, p in model.named_parameters()}
        state = OptimizerState(learning_rate=0.1, warmup_steps=0, total_steps=10)

        for _ in range(3):
            adam_step(model, grads, state)

        assert state.step == 3
        for name, param in model.named_parameters():
            assert torch.equal(before[name], param.detach()), name
        first, second = state.moments(model)['head.weight']
        assert not first.any()
        assert not second.any()

    def test_adam_rejects_missing_gradient(self):
        model = CrossEncoder(self.config)
        grads = {name: torch.zeros_like(p) for name, p in model.named_parameters()}
        del grads['head.weight']
        with pytest.raises(ShapeMismatchError):
            adam_step(model, grads, OptimizerState())

    def test_adam_rejects_wrong_shape(self):
        model = CrossEncoder(self.config)
        grads = {name: torch.zeros_like(p) for name, p in model.named_parameters()}
        grads['head.weight'] = torch.zeros(3)
        with pytest.raises(ShapeMismatchError):
            adam_step(model, grads, OptimizerState())


@pytest.mark.encoder
class TestCheckpoint(SimpleTestCase):
    """Test the MCKP checkpoint container"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, micro_config, tmp_path):
        self.config = micro_config
        self.tmp_path = tmp_path

    def test_round_trip_restores_kind_config_and_weights(self):
        model = CrossEncoder(self.config)
        path = save_checkpoint(model, 'reranker', self.tmp_path / 'reranker.mckp')

        kind, restored = load_checkpoint(path)

        assert kind == 'reranker'
        assert restored.config == self.config
        for name, tensor in model.state_dict().items():
            assert torch.equal(tensor, restored.state_dict()[name]), name

    def test_bytes_are_deterministic(self):
        assert checkpoint_bytes(BiEncoder(self.config), 'retriever') == \
            checkpoint_bytes(BiEncoder(self.config), 'retriever')

    def test_header_layout(self):
        model = CrossEncoder(self.config)
        data = checkpoint_bytes(model, 'reranker')

        assert data[:4] == CHECKPOINT_MAGIC
        version, header_length = struct.unpack_from('<II', data, 4)
        assert version == CHECKPOINT_VERSION
        header = json.loads(data[12:12 + header_length].decode('utf-8'))
        assert header['kind'] == 'reranker'
        tensor_count, = struct.unpack_from('<I', data, 12 + header_length)
        assert tensor_count == len(model.state_dict())

    def test_bad_magic(self):
        path = self.tmp_path / 'bad.mckp'
        path.write_bytes(b'XXXX' + checkpoint_bytes(CrossEncoder(self.config), 'reranker')[4:])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_truncated_file(self):
        path = self.tmp_path / 'short.mckp'
        path.write_bytes(checkpoint_bytes(CrossEncoder(self.config), 'reranker')[:-10])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_trailing_bytes(self):
        path = self.tmp_path / 'long.mckp'
        path.write_bytes(checkpoint_bytes(CrossEncoder(self.config), 'reranker') + b'\x00')
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_wrong_kind(self):
        path = save_checkpoint(CrossEncoder(self.config), 'reranker', self.tmp_path / 'model.mckp')
        with pytest.raises(CheckpointFormatError):
            load_kind(path, 'retriever')


@pytest.mark.encoder
@pytest.mark.gradcheck
class TestGradientCheck(SimpleTestCase):
    """Compare autograd with central finite differences in 64-bit"""

    @pytest.fixture(autouse=True)
    def _fixtures(self, micro_config, tiny_vocab):
        self.config = micro_config
        self.vocab = tiny_vocab

    def _retriever_loss_fn(self, model):
        queries = [tokenize(self.vocab, text, self.config.max_query_length)
                   for text in ('insulin resistance', 'statin cholesterol', 'asthma children', 'vaccine')]
        documents = [tokenize_document(self.vocab, title, abstract, self.config.max_document_length)
                     for title, abstract in (('insulin resistance in obese adults', 'glucose uptake'),
                                             ('statin therapy and cholesterol', 'statins lower cholesterol'),
                                             ('asthma exacerbation in children', 'inhaled steroids'),
                                             ('influenza vaccine effectiveness', ''))]
        weights = click_weights([1, 3, 7, 2])

        def loss_fn():
            q = encode_batch(model.query_encoder, queries)
            d = encode_batch(model.doc_encoder, documents)
            return retriever_batch_loss(q, d, weights, 0.8)
        return loss_fn

    def _reranker_loss_fn(self, model):
        query = tokenize(self.vocab, 'insulin sensitivity', self.config.max_query_length)
        docs = [document_token_ids(self.vocab, title, '') for title in
                ('metformin and insulin sensitivity', 'statin therapy', 'sleep apnea', 'bone density')]
        sequences = [cross_layout(query, tokens, self.config.max_cross_length) for tokens in docs]

        def loss_fn():
            scores = cross_score_batch(model, sequences)
            return reranker_loss(scores[0], scores[1:])
        return loss_fn

    def test_relative_error_floor(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1e-9, 0.0) == pytest.approx(1e-5)
        assert relative_error(2.0, 1.0) == pytest.approx(0.5)

    def test_retriever_loss_sampled_entries(self):
        model = build_model('retriever', self.config, torch.float64)
        result = max_relative_error(model, self._retriever_loss_fn(model), max_entries_per_tensor=4)
        assert result.entries_checked > 0
        assert result.passed(), result

    def test_reranker_loss_sampled_entries(self):
        model = build_model('reranker', self.config, torch.float64)
        result = max_relative_error(model, self._reranker_loss_fn(model), max_entries_per_tensor=4)
        assert result.passed(), result

    @pytest.mark.slow
    def test_retriever_loss_every_parameter(self):
        model = build_model('retriever', self.config, torch.float64)
        result = max_relative_error(model, self._retriever_loss_fn(model))
        assert result.entries_checked == parameter_count(model)
        assert result.passed(), result

    @pytest.mark.slow
    def test_reranker_loss_every_parameter(self):
        model = build_model('reranker', self.config, torch.float64)
        result = max_relative_error(model, self._reranker_loss_fn(model))
        assert result.entries_checked == parameter_count(model)
        assert result.passed(), result
