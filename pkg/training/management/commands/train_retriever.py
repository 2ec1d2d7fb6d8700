"""
Management command to train the bi-encoder retriever on curated click pairs
"""
from encoder.checkpoint import save_checkpoint
from encoder.vocab import Vocabulary
from evalkit.trec import load_qrels
from medsearch.commands import ExperimentCommand
from medsearch.corpus import load_corpus
from medsearch.validation import InputValidator

from training.services import train_retriever, write_loss_log
from training.types import ClickPair, read_pairs


def heldout_pairs(queries_path, qrels_path):
    """Held-out queries as single-click pairs, one per relevant article."""
    if not queries_path.exists() or not qrels_path.exists():
        return []
    qrels = load_qrels(qrels_path)
    pairs = []
    for qid, text in InputValidator.read_tsv_pairs(queries_path):
        for doc_id, grade in sorted(qrels.get(qid, {}).items()):
            if grade > 0:
                pairs.append(ClickPair(qid, text, doc_id, 1))
    return pairs


class Command(ExperimentCommand):
    help = 'Train the retriever and write retriever.mckp and retriever_loss.csv'
    stage = 'train_retriever'
    config_flags = {
        'steps': ('retriever', 'steps'),
        'batch_size': ('retriever', 'batch_size'),
        'learning_rate': ('retriever', 'learning_rate'),
    }

    def add_stage_arguments(self, parser):
        parser.add_argument('--steps', type=int, help='Optimizer steps')
        parser.add_argument('--batch-size', type=int, help='In-batch size B')
        parser.add_argument('--learning-rate', type=float, help='Peak learning rate')
        parser.add_argument('--pairs', help='Pair file (default: retriever_pairs.jsonl in the output directory)')

    def run(self, experiment, timer, **options):
        corpus = load_corpus(experiment.path('corpus'))
        vocab = Vocabulary.load(experiment.path('vocab'))
        pairs = read_pairs(options.get('pairs') or experiment.path('retriever_pairs'))
        eval_pairs = heldout_pairs(experiment.path('queries'), experiment.path('qrels'))
        if len(eval_pairs) < 2:
            eval_pairs = []

        result = train_retriever(
            pairs, corpus, vocab,
            experiment.encoder_config('retriever', len(vocab)),
            experiment.retriever_config(),
            out_dir=experiment.out_dir,
            eval_items=eval_pairs,
        )
        save_checkpoint(result.model, 'retriever', experiment.path('retriever'))
        write_loss_log(experiment.path('retriever_loss'), result.losses)
        timer.counts.update({'pairs': len(pairs), 'steps': len(result.losses)})

        if result.losses:
            self.stdout.write(f'final training loss: {result.losses[-1][2]:.6f}')
        if result.initial_eval_loss is not None:
            self.stdout.write(f'held-out loss: {result.initial_eval_loss:.6f} -> {result.final_eval_loss:.6f}')
        self.success('Retriever trained', experiment.path('retriever'))
