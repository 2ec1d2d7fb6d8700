"""
Management command to curate a click log into retriever and re-ranker training pairs
"""
import json

from medsearch.commands import ExperimentCommand
from medsearch.corpus import load_corpus
from training.types import write_pairs

from logkit.curation import curate
from logkit.types import read_logs


class Command(ExperimentCommand):
    help = 'Filter navigational queries, split keyword queries out and write the pair files'
    stage = 'curate'

    def run(self, experiment, timer, **options):
        corpus = load_corpus(experiment.path('corpus'))
        logs = read_logs(experiment.path('logs'))
        result = curate(logs, corpus)

        write_pairs(experiment.path('retriever_pairs'), result.retriever_pairs)
        write_pairs(experiment.path('reranker_pairs'), result.reranker_pairs)
        stats_path = experiment.path('curation_stats')
        stats_path.write_text(json.dumps(result.stats, indent=2, sort_keys=True) + '\n', encoding='utf-8')
        timer.counts.update({name: value for name, value in result.stats['funnel']})

        for name, value in result.stats['funnel']:
            self.stdout.write(f'{name}: {value}')
        self.success('Curation finished', stats_path)
