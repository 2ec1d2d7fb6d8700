"""
Management command to generate the synthetic article corpus and its synonym table
"""
from medsearch.commands import ExperimentCommand
from medsearch.corpus import write_corpus

from logkit.generation import generate_corpus
from logkit.types import write_synonyms


class Command(ExperimentCommand):
    help = 'Generate a synthetic corpus (corpus.jsonl) and the synonym table (synonyms.json)'
    stage = 'gen_corpus'
    config_flags = {
        'num_articles': ('corpus', 'num_articles'),
        'distractor_rate': ('corpus', 'distractor_rate'),
    }

    def add_stage_arguments(self, parser):
        parser.add_argument('--num-articles', type=int, help='Number of source articles')
        parser.add_argument('--distractor-rate', type=float, help='Share of articles given a near-duplicate')

    def run(self, experiment, timer, **options):
        generated = generate_corpus(experiment.corpus_config())
        written = write_corpus(experiment.path('corpus'), generated.articles)
        write_synonyms(experiment.path('synonyms'), generated.synonyms)
        timer.counts.update({'articles': written, 'distractors': len(generated.distractors)})

        self.stdout.write(f'{written} articles ({len(generated.distractors)} distractors), '
                          f'{len(generated.synonyms)} terms with synonyms')
        self.success('Corpus written', experiment.path('corpus'))
