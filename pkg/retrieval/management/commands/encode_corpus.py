"""
Management command to encode the corpus with the retriever's document encoder
"""
import hashlib
from pathlib import Path

from encoder.checkpoint import load_kind
from encoder.vocab import Vocabulary
from medsearch.commands import ExperimentCommand
from medsearch.corpus import load_corpus

from retrieval.index import save_index
from retrieval.services import CorpusEncoder


def checkpoint_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


class Command(ExperimentCommand):
    help = 'Encode every article into corpus.medv; chunks in the work directory make the run resumable'
    stage = 'encode_corpus'
    config_flags = {'chunk_size': ('pipeline', 'encode_chunk_size')}

    def add_stage_arguments(self, parser):
        parser.add_argument('--chunk-size', type=int, help='Articles per chunk')
        parser.add_argument('--work-dir', help='Chunk directory (default: per-checkpoint directory under the output)')

    def run(self, experiment, timer, **options):
        vocab = Vocabulary.load(experiment.path('vocab'))
        checkpoint = experiment.path('retriever')
        retriever = load_kind(checkpoint, 'retriever')
        corpus = load_corpus(experiment.path('corpus'))

        work_dir = options.get('work_dir') or experiment.path('index_work') / checkpoint_digest(checkpoint)
        encoder = CorpusEncoder(retriever, vocab, chunk_size=experiment.encode_chunk_size,
                                work_dir=work_dir, threads=experiment.threads)
        matrix = encoder.encode(corpus.articles())
        save_index(matrix, experiment.path('index'))
        timer.counts.update({'articles': matrix.size, 'reused_chunks': encoder.reused_chunks})

        self.stdout.write(f'{matrix.size} articles encoded ({encoder.reused_chunks} chunks reused)')
        self.success('Index written', experiment.path('index'))
