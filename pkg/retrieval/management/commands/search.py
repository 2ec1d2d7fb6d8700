"""
Management command to run first-stage retrieval for a query file
"""
from encoder.checkpoint import load_kind
from encoder.vocab import Vocabulary
from evalkit.bm25 import Bm25Index
from evalkit.trec import Run, write_run
from medsearch.commands import ExperimentCommand
from medsearch.corpus import load_corpus
from medsearch.validation import InputValidator

from retrieval.index import load_index
from retrieval.services import dense_search


class Command(ExperimentCommand):
    help = 'Rank the corpus for each query (TSV: qid TAB text) and write a TREC run'
    stage = 'search'
    config_flags = {'k': ('pipeline', 'top_k')}

    def add_stage_arguments(self, parser):
        parser.add_argument('--first-stage', choices=('dense', 'bm25'), default='dense',
                            help='Dense retriever over corpus.medv, or BM25 over the corpus')
        parser.add_argument('--queries', help='Query file (default: held-out queries in the output directory)')
        parser.add_argument('--k', type=int, help='Results per query (K)')
        parser.add_argument('--output', help='Run file (default: run.trec in the output directory)')

    def run(self, experiment, timer, **options):
        queries = InputValidator.read_tsv_pairs(options.get('queries') or experiment.path('queries'))
        k = experiment.top_k

        if options['first_stage'] == 'bm25':
            index = Bm25Index(load_corpus(experiment.path('corpus')).articles(), experiment.bm25_config())
            run = Run(index.rank(text, k, qid) for qid, text in queries)
        else:
            vocab = Vocabulary.load(experiment.path('vocab'))
            retriever = load_kind(experiment.path('retriever'), 'retriever')
            matrix = load_index(experiment.path('index'))
            run = Run(dense_search(retriever, vocab, matrix, text, k, qid) for qid, text in queries)

        output = write_run(run, options.get('output') or experiment.path('run'))
        timer.counts.update({'queries': len(queries), 'k': k})
        self.success(f'{len(queries)} queries searched ({options["first_stage"]})', output)
