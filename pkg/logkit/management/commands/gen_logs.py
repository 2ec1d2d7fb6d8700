"""
Management command to generate a synthetic click log and the held-out benchmark
"""
from collections import Counter

from evalkit.trec import write_qrels
from medsearch.commands import ExperimentCommand
from medsearch.corpus import load_corpus
from medsearch.validation import InputValidator

from logkit.generation import generate_benchmark, generate_logs
from logkit.types import QUERY_KINDS, read_synonyms, write_logs


class Command(ExperimentCommand):
    help = 'Generate logs.jsonl plus held-out queries and qrels kept out of the log'
    stage = 'gen_logs'
    config_flags = {
        'num_keyword': ('logs', 'num_keyword'),
        'num_nonkeyword': ('logs', 'num_nonkeyword'),
        'num_navigational': ('logs', 'num_navigational'),
        'heldout_queries': ('logs', 'heldout_queries'),
    }

    def add_stage_arguments(self, parser):
        parser.add_argument('--num-keyword', type=int, help='Keyword queries to generate')
        parser.add_argument('--num-nonkeyword', type=int, help='Non-keyword queries to generate')
        parser.add_argument('--num-navigational', type=int, help='Navigational queries to generate')
        parser.add_argument('--heldout-queries', type=int, help='Held-out benchmark queries')

    def run(self, experiment, timer, **options):
        corpus = load_corpus(experiment.path('corpus'))
        synonyms = read_synonyms(experiment.path('synonyms'))
        cfg = experiment.logs_config()

        benchmark = generate_benchmark(corpus, synonyms, cfg.heldout_queries,
                                       seed=experiment.component_seed('heldout'))
        records = generate_logs(corpus, synonyms, cfg, exclude=benchmark.excluded_ids)

        written = write_logs(experiment.path('logs'), records)
        InputValidator.write_tsv(experiment.path('queries'), benchmark.queries)
        write_qrels(benchmark.qrels, experiment.path('qrels'))

        by_kind = Counter(record.kind for record in records)
        timer.counts.update({'records': written, 'heldout': len(benchmark.queries)})
        for kind in QUERY_KINDS:
            self.stdout.write(f'{kind}: {by_kind.get(kind, 0)}')
        self.stdout.write(f'total: {written}')
        self.stdout.write(f'held-out queries: {len(benchmark.queries)}')
        self.success('Click log written', experiment.path('logs'))
