"""
Retriever and re-ranker training loops, held-out losses and local negative
mining.
"""
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch
from torch import nn

from encoder.checkpoint import save_checkpoint
from encoder.network import BiEncoder, CrossEncoder, EncoderConfig, build_model
from encoder.optim import OptimizerState, adam_step
from encoder.services import accumulate, backward, cross_score_batch, encode_batch
from encoder.tokenization import TokenSequence, cross_layout, document_token_ids, tokenize, tokenize_document
from encoder.vocab import Vocabulary
from medsearch.corpus import Corpus
from medsearch.exceptions import InsufficientBatchError, get_error_context
from medsearch.monitoring import StageTimer
from medsearch.seeding import derive_rng
from retrieval.index import EmbeddingMatrix, RankedList, full_ranking
from retrieval.services import encode_queries

from .losses import click_weights, reranker_loss, retriever_batch_loss
from .types import ClickPair, RerankInstance, RerankTrainConfig, RetrieverTrainConfig, group_by_query


logger = logging.getLogger(__name__)


@dataclass
class TrainingResult:
    model: nn.Module
    losses: List[Tuple[int, float, float]] = field(default_factory=list)
    initial_eval_loss: Optional[float] = None
    final_eval_loss: Optional[float] = None
    checkpoints: List[Path] = field(default_factory=list)


def write_loss_log(path: Any, losses: Sequence[Tuple[int, float, float]]) -> Path:
    """CSV with columns step, lr, loss."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['step', 'lr', 'loss'])
        for step, lr, loss in losses:
            writer.writerow([step, repr(lr), repr(loss)])
    return path


class EpochBatcher:
    """
    Endless index batches: each epoch is a seeded permutation cut into full
    batches; the remainder of an epoch is dropped.
    """

    def __init__(self, count: int, batch_size: int, seed: int, name: str):
        self.count = count
        self.batch_size = batch_size
        self.seed = seed
        self.name = name

    def __iter__(self) -> Iterator[np.ndarray]:
        epoch = 0
        while True:
            order = derive_rng(self.seed, self.name, 'epoch', epoch).permutation(self.count)
            for start in range(0, self.count - self.batch_size + 1, self.batch_size):
                yield order[start:start + self.batch_size]
            epoch += 1


class BaseTrainer:
    """
    Shared optimisation loop: scheduled Adam, gradient accumulation, loss
    log and periodic checkpoints. Subclasses provide the batch loss.
    """
    kind = ''
    accumulation = 1

    def __init__(self, items: Sequence[Any], corpus: Corpus, vocab: Vocabulary,
                 encoder_config: EncoderConfig, config, out_dir: Optional[Any] = None,
                 eval_items: Sequence[Any] = (), dtype: torch.dtype = torch.float32):
        self.items = list(items)
        self.corpus = corpus
        self.vocab = vocab
        self.encoder_config = encoder_config
        self.config = config
        self.out_dir = Path(out_dir) if out_dir else None
        self.eval_items = list(eval_items)
        self.model = build_model(self.kind, encoder_config, dtype)
        self._queries: Dict[str, TokenSequence] = {}

    def query_sequence(self, text: str) -> TokenSequence:
        sequence = self._queries.get(text)
        if sequence is None:
            sequence = tokenize(self.vocab, text, self.encoder_config.max_query_length)
            self._queries[text] = sequence
        return sequence

    def batch_loss(self, batch: Sequence[Any]) -> torch.Tensor:
        raise NotImplementedError

    def eval_loss(self) -> Optional[float]:
        raise NotImplementedError

    def _checkpoint(self, step: int) -> Optional[Path]:
        every = self.config.checkpoint_every
        if not self.out_dir or not every or step % every:
            return None
        return save_checkpoint(self.model, self.kind, self.out_dir / 'checkpoints' / f"{self.kind}-step{step:06d}.mckp")

    def train(self) -> TrainingResult:
        cfg = self.config
        result = TrainingResult(self.model)
        if cfg.steps > 0 and len(self.items) < cfg.batch_size:
            raise InsufficientBatchError(
                message=f"{self.kind} training needs at least {cfg.batch_size} items, got {len(self.items)}",
                context=get_error_context(stage=f"train_{self.kind}", items=len(self.items))
            )
        result.initial_eval_loss = self.eval_loss()
        state = OptimizerState(learning_rate=cfg.learning_rate, epsilon=cfg.epsilon,
                               warmup_steps=cfg.warmup_steps, total_steps=cfg.steps)
        batches = iter(EpochBatcher(len(self.items), cfg.batch_size, cfg.seed, self.kind))

        with StageTimer(f"train_{self.kind}") as timer:
            for step in range(1, cfg.steps + 1):
                total: Dict[str, torch.Tensor] = {}
                step_loss = 0.0
                for _ in range(self.accumulation):
                    batch = [self.items[i] for i in next(batches)]
                    loss = self.batch_loss(batch) / self.accumulation
                    total = accumulate(total, backward(self.model, loss))
                    step_loss += loss.item()
                adam_step(self.model, total, state)
                result.losses.append((step, state.current_lr, step_loss))
                if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps):
                    logger.info(f"{self.kind} step {step}/{cfg.steps} lr {state.current_lr:.3e} loss {step_loss:.6f}")
                checkpoint = self._checkpoint(step)
                if checkpoint:
                    result.checkpoints.append(checkpoint)
            timer.counts['steps'] = cfg.steps

        result.final_eval_loss = self.eval_loss()
        if result.initial_eval_loss is not None:
            logger.info(f"{self.kind} held-out loss {result.initial_eval_loss:.6f} -> {result.final_eval_loss:.6f}")
        return result


class RetrieverTrainer(BaseTrainer):
    """Bi-encoder training with click-weighted bidirectional in-batch negatives."""
    kind = 'retriever'

    def __init__(self, pairs: Sequence[ClickPair], corpus: Corpus, vocab: Vocabulary,
                 encoder_config: EncoderConfig, config: RetrieverTrainConfig, **kwargs):
        super().__init__(pairs, corpus, vocab, encoder_config, config, **kwargs)
        self.accumulation = config.grad_accumulation
        self._documents: Dict[str, TokenSequence] = {}

    def doc_sequence(self, doc_id: str) -> TokenSequence:
        sequence = self._documents.get(doc_id)
        if sequence is None:
            article = self.corpus.resolve(doc_id, stage='train_retriever')
            sequence = tokenize_document(self.vocab, article.title, article.abstract,
                                         self.encoder_config.max_document_length)
            self._documents[doc_id] = sequence
        return sequence

    def batch_loss(self, batch: Sequence[ClickPair], model: Optional[BiEncoder] = None) -> torch.Tensor:
        model = model or self.model
        documents = [self.doc_sequence(pair.doc_id) for pair in batch]
        queries = [self.query_sequence(pair.query) for pair in batch]
        weights = click_weights([pair.clicks for pair in batch])
        q_embs = encode_batch(model.query_encoder, queries)
        d_embs = encode_batch(model.doc_encoder, documents)
        return retriever_batch_loss(q_embs, d_embs, weights, self.config.alpha)

    def eval_loss(self) -> Optional[float]:
        if not self.eval_items:
            return None
        return retriever_eval_loss(self, self.eval_items)


class RerankerTrainer(BaseTrainer):
    """Cross-encoder training on mined local negatives."""
    kind = 'reranker'

    def __init__(self, instances: Sequence[RerankInstance], corpus: Corpus, vocab: Vocabulary,
                 encoder_config: EncoderConfig, config: RerankTrainConfig, **kwargs):
        super().__init__(instances, corpus, vocab, encoder_config, config, **kwargs)
        self._doc_tokens: Dict[str, List[int]] = {}

    def doc_tokens(self, doc_id: str) -> List[int]:
        tokens = self._doc_tokens.get(doc_id)
        if tokens is None:
            article = self.corpus.resolve(doc_id, stage='train_reranker')
            tokens = document_token_ids(self.vocab, article.title, article.abstract)
            self._doc_tokens[doc_id] = tokens
        return tokens

    def instance_losses(self, batch: Sequence[RerankInstance], model: Optional[CrossEncoder] = None) -> torch.Tensor:
        model = model or self.model
        sequences: List[TokenSequence] = []
        spans: List[Tuple[int, int]] = []
        for instance in batch:
            q = self.query_sequence(instance.query)
            start = len(sequences)
            for doc_id in (instance.pos,) + tuple(instance.negs):
                sequences.append(cross_layout(q, self.doc_tokens(doc_id), self.encoder_config.max_cross_length))
            spans.append((start, len(sequences)))
        scores = cross_score_batch(model, sequences)
        return torch.stack([reranker_loss(scores[start], scores[start + 1:end]) for start, end in spans])

    def batch_loss(self, batch: Sequence[RerankInstance], model: Optional[CrossEncoder] = None) -> torch.Tensor:
        losses = self.instance_losses(batch, model)
        weights = torch.as_tensor(click_weights([instance.clicks for instance in batch]), dtype=losses.dtype)
        return (weights * losses).sum()

    def eval_loss(self) -> Optional[float]:
        if not self.eval_items:
            return None
        return reranker_eval_loss(self, self.eval_items)


def retriever_eval_loss(trainer: RetrieverTrainer, pairs: Sequence[ClickPair]) -> float:
    """
    Mean in-batch loss over consecutive batches of ``pairs`` in file order.
    A final short batch is kept when it has at least two pairs.
    """
    size = trainer.config.batch_size
    batches = [pairs[start:start + size] for start in range(0, len(pairs), size)]
    batches = [batch for batch in batches if len(batch) >= 2]
    if not batches:
        raise InsufficientBatchError(message="Held-out retriever loss needs at least two pairs",
                                     context={'pairs': len(pairs)})
    with torch.no_grad():
        losses = [trainer.batch_loss(batch).item() for batch in batches]
    return float(np.mean(losses))


def reranker_eval_loss(trainer: RerankerTrainer, instances: Sequence[RerankInstance]) -> float:
    """Unweighted mean instance loss."""
    size = trainer.config.batch_size
    with torch.no_grad():
        losses = [trainer.instance_losses(instances[start:start + size])
                  for start in range(0, len(instances), size)]
    return float(torch.cat(losses).mean().item())


def train_retriever(pairs: Sequence[ClickPair], corpus: Corpus, vocab: Vocabulary,
                    encoder_config: EncoderConfig, config: RetrieverTrainConfig, **kwargs) -> TrainingResult:
    return RetrieverTrainer(pairs, corpus, vocab, encoder_config, config, **kwargs).train()


def train_reranker(instances: Sequence[RerankInstance], corpus: Corpus, vocab: Vocabulary,
                   encoder_config: EncoderConfig, config: RerankTrainConfig, **kwargs) -> TrainingResult:
    return RerankerTrainer(instances, corpus, vocab, encoder_config, config, **kwargs).train()


# =============================================================================
# LOCAL NEGATIVE MINING
# =============================================================================

def sample_window(ranking: RankedList, pair: ClickPair, clicked: Set[str],
                  config: RerankTrainConfig, seed: int) -> Optional[RerankInstance]:
    """
    Draw up to M unclicked ids uniformly without replacement from rank
    positions ``[e, min(f, N)]`` (1-based), returned in rank order.
    """
    window = ranking.doc_ids[config.window_start - 1:config.window_end]
    candidates = [doc_id for doc_id in window if doc_id not in clicked]
    if not candidates:
        logger.warning(
            f"No unclicked candidates in ranks [{config.window_start}, {config.window_end}] "
            f"for query {pair.qid}; instance skipped"
        )
        return None
    rng = derive_rng(seed, 'mine_negatives', pair.qid, pair.doc_id)
    picked = rng.choice(len(candidates), size=min(config.num_negatives, len(candidates)), replace=False)
    negatives = tuple(candidates[i] for i in sorted(picked.tolist()))
    return RerankInstance(pair.qid, pair.query, pair.doc_id, negatives, pair.clicks)


def mine_local_negatives(retriever: BiEncoder, vocab: Vocabulary, matrix: EmbeddingMatrix,
                         pair: ClickPair, config: RerankTrainConfig, seed: int,
                         clicked: Optional[Set[str]] = None) -> Optional[RerankInstance]:
    """
    Rank the whole corpus for ``pair.query`` and sample negatives from the
    configured window, excluding every clicked article of the query.
    """
    q_vec = encode_queries(retriever, vocab, [pair.query])[0]
    ranking = full_ranking(matrix, q_vec, pair.qid)
    return sample_window(ranking, pair, set(clicked or ()) | {pair.doc_id}, config, seed)


class NegativeMiner:
    """Mines every pair of a click-pair set, one full ranking per query."""

    def __init__(self, retriever: BiEncoder, vocab: Vocabulary, matrix: EmbeddingMatrix,
                 config: RerankTrainConfig, seed: int, threads: int = 1):
        self.retriever = retriever
        self.vocab = vocab
        self.matrix = matrix
        self.config = config
        self.seed = seed
        self.threads = max(1, threads)
        self.skipped = 0

    def _mine_group(self, group: List[ClickPair]) -> List[Optional[RerankInstance]]:
        q_vec = encode_queries(self.retriever, self.vocab, [group[0].query])[0]
        ranking = full_ranking(self.matrix, q_vec, group[0].qid)
        clicked = {pair.doc_id for pair in group}
        return [sample_window(ranking, pair, clicked, self.config, self.seed) for pair in group]

    def mine(self, pairs: Sequence[ClickPair]) -> List[RerankInstance]:
        groups = list(group_by_query(pairs).values())
        with StageTimer('mine_negatives') as timer:
            if self.threads == 1:
                results = [self._mine_group(group) for group in groups]
            else:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    results = list(pool.map(self._mine_group, groups))
            instances = [instance for group in results for instance in group if instance is not None]
            self.skipped = sum(1 for group in results for instance in group if instance is None)
            timer.counts.update({'pairs': len(pairs), 'instances': len(instances), 'skipped': self.skipped})
        return instances
