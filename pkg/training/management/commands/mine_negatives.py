"""
Management command to mine local negatives for re-ranker training
"""
from encoder.checkpoint import load_kind
from encoder.vocab import Vocabulary
from medsearch.commands import ExperimentCommand
from medsearch.corpus import load_corpus
from retrieval.index import load_index
from retrieval.services import encode_corpus

from training.services import NegativeMiner
from training.types import read_pairs, write_instances


class Command(ExperimentCommand):
    help = 'Sample unclicked articles from retriever ranks [e, f] for every re-ranker pair'
    stage = 'mine_negatives'
    config_flags = {
        'num_negatives': ('reranker', 'num_negatives'),
        'window_start': ('reranker', 'window_start'),
        'window_end': ('reranker', 'window_end'),
    }

    def add_stage_arguments(self, parser):
        parser.add_argument('--num-negatives', type=int, help='Negatives per instance (M)')
        parser.add_argument('--window-start', type=int, help='First mined rank (e, 1-based)')
        parser.add_argument('--window-end', type=int, help='Last mined rank (f, inclusive)')

    def run(self, experiment, timer, **options):
        vocab = Vocabulary.load(experiment.path('vocab'))
        retriever = load_kind(experiment.path('retriever'), 'retriever')
        index_path = experiment.path('index')
        if index_path.exists():
            matrix = load_index(index_path)
        else:
            self.stdout.write(self.style.WARNING(f'{index_path} not found; encoding the corpus in memory'))
            corpus = load_corpus(experiment.path('corpus'))
            matrix = encode_corpus(retriever, vocab, corpus.articles(),
                                   chunk_size=experiment.encode_chunk_size, threads=experiment.threads)

        pairs = read_pairs(experiment.path('reranker_pairs'))
        miner = NegativeMiner(retriever, vocab, matrix, experiment.reranker_config(),
                              seed=experiment.component_seed('mine_negatives'), threads=experiment.threads)
        instances = miner.mine(pairs)
        written = write_instances(experiment.path('instances'), instances)
        timer.counts.update({'pairs': len(pairs), 'instances': written, 'skipped': miner.skipped})

        self.stdout.write(f'{written} instances from {len(pairs)} pairs ({miner.skipped} skipped)')
        self.success('Negatives mined', experiment.path('instances'))
