"""
Management command to build the word-level vocabulary
"""
from medsearch.commands import ExperimentCommand
from medsearch.corpus import load_corpus
from training.types import read_pairs

from encoder.vocab import build_vocab


class Command(ExperimentCommand):
    help = 'Build vocab.txt from the corpus and, when present, the retriever training queries'
    stage = 'build_vocab'
    config_flags = {'max_size': ('encoder', 'vocab_size')}

    def add_stage_arguments(self, parser):
        parser.add_argument('--max-size', type=int, help='Vocabulary size cap, specials included')

    def run(self, experiment, timer, **options):
        corpus = load_corpus(experiment.path('corpus'))
        pairs_path = experiment.path('retriever_pairs')
        queries = [pair.query for pair in read_pairs(pairs_path)] if pairs_path.exists() else []
        if not queries:
            self.stdout.write(self.style.WARNING('No retriever pairs found; vocabulary built from the corpus only'))

        vocab = build_vocab(corpus.articles(), experiment.encoder_config('retriever').vocab_size,
                            extra_texts=queries)
        vocab.save(experiment.path('vocab'))
        timer.counts.update({'tokens': len(vocab), 'queries': len(queries)})
        self.success(f'Vocabulary of {len(vocab)} tokens', experiment.path('vocab'))
