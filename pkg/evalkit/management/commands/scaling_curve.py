"""
Management command to measure retrieval quality against the number of training pairs
"""
from encoder.vocab import Vocabulary
from evalkit.trec import load_qrels
from medsearch.commands import ExperimentCommand
from medsearch.corpus import load_corpus
from medsearch.exceptions import ScalingSizeError
from medsearch.validation import InputValidator
from training.types import read_pairs

from evalkit.services import scaling_curve, write_scaling_curve


def parse_sizes(text):
    try:
        return [int(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise ScalingSizeError(message=f"Sizes must be comma-separated integers, got {text!r}",
                               context={'sizes': text})


class Command(ExperimentCommand):
    help = 'Train one retriever per prefix of the pair file and write pairs vs NDCG@k as CSV'
    stage = 'scaling_curve'

    def add_stage_arguments(self, parser):
        parser.add_argument('--sizes', required=True, help='Ascending comma-separated pair counts')
        parser.add_argument('--k', type=int, default=10, help='NDCG cutoff')

    def run(self, experiment, timer, **options):
        sizes = parse_sizes(options['sizes'])
        corpus = load_corpus(experiment.path('corpus'))
        vocab = Vocabulary.load(experiment.path('vocab'))
        pairs = read_pairs(experiment.path('retriever_pairs'))
        queries = InputValidator.read_tsv_pairs(experiment.path('queries'))
        qrels = load_qrels(experiment.path('qrels'))

        rows = scaling_curve(
            pairs, sizes, corpus, vocab,
            experiment.encoder_config('retriever', len(vocab)),
            experiment.retriever_config(),
            queries, qrels, k=options['k'], threads=experiment.threads,
        )
        output = write_scaling_curve(experiment.path('scaling_curve'), rows, options['k'])
        timer.counts.update({'points': len(rows)})
        for size, score in rows:
            self.stdout.write(f'{size}: NDCG@{options["k"]} {score:.4f}')
        self.success('Scaling curve written', output)
