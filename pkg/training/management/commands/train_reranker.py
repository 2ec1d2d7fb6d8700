"""
Management command to train the cross-encoder re-ranker on mined instances
"""
from encoder.checkpoint import save_checkpoint
from encoder.vocab import Vocabulary
from medsearch.commands import ExperimentCommand
from medsearch.corpus import load_corpus

from training.services import train_reranker, write_loss_log
from training.types import read_instances


class Command(ExperimentCommand):
    help = 'Train the re-ranker and write reranker.mckp and reranker_loss.csv'
    stage = 'train_reranker'
    config_flags = {
        'steps': ('reranker', 'steps'),
        'batch_size': ('reranker', 'batch_size'),
        'learning_rate': ('reranker', 'learning_rate'),
    }

    def add_stage_arguments(self, parser):
        parser.add_argument('--steps', type=int, help='Optimizer steps')
        parser.add_argument('--batch-size', type=int, help='Instances per step')
        parser.add_argument('--learning-rate', type=float, help='Peak learning rate')

    def run(self, experiment, timer, **options):
        corpus = load_corpus(experiment.path('corpus'))
        vocab = Vocabulary.load(experiment.path('vocab'))
        instances = read_instances(experiment.path('instances'))

        result = train_reranker(
            instances, corpus, vocab,
            experiment.encoder_config('reranker', len(vocab)),
            experiment.reranker_config(),
            out_dir=experiment.out_dir,
        )
        save_checkpoint(result.model, 'reranker', experiment.path('reranker'))
        write_loss_log(experiment.path('reranker_loss'), result.losses)
        timer.counts.update({'instances': len(instances), 'steps': len(result.losses)})

        if result.losses:
            self.stdout.write(f'final training loss: {result.losses[-1][2]:.6f}')
        self.success('Re-ranker trained', experiment.path('reranker'))
