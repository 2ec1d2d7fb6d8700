"""
Management command to correlate query-encoder similarities with gold sentence scores
"""
import csv

from encoder.checkpoint import load_kind
from encoder.vocab import Vocabulary
from medsearch.commands import ExperimentCommand
from medsearch.exceptions import InvalidRecordError, get_error_context
from medsearch.validation import InputValidator

from evalkit.services import SIMILARITY_METRICS, similarity_correlation


def read_sentence_pairs(path):
    rows = []
    for line_no, (s1, s2, gold) in enumerate(InputValidator.read_tsv_pairs(path, columns=3), start=1):
        try:
            rows.append((s1, s2, float(gold)))
        except ValueError:
            raise InvalidRecordError(
                message=f"Gold score {gold!r} is not a number in {path} (row {line_no})",
                context=get_error_context(path=path, line=line_no)
            )
    return rows


class Command(ExperimentCommand):
    help = 'Pearson r between E(s1)^T E(s2) and gold scores over a TSV of (sentence1, sentence2, score)'
    stage = 'eval_similarity'

    def add_stage_arguments(self, parser):
        parser.add_argument('--pairs', required=True, help='TSV file: sentence1 TAB sentence2 TAB score')
        parser.add_argument('--metric', choices=SIMILARITY_METRICS, default='dot', help='Similarity function')
        parser.add_argument('--output', help='Optional CSV of per-pair predictions')

    def run(self, experiment, timer, **options):
        rows = read_sentence_pairs(options['pairs'])
        model = load_kind(experiment.path('retriever'), 'retriever')
        vocab = Vocabulary.load(experiment.path('vocab'))
        r, predictions = similarity_correlation(model, vocab, rows, options['metric'])

        if options.get('output'):
            with open(options['output'], 'w', encoding='utf-8', newline='') as handle:
                writer = csv.writer(handle, lineterminator='\n')
                writer.writerow(['sentence1', 'sentence2', 'gold', 'prediction'])
                for (s1, s2, gold), prediction in zip(rows, predictions):
                    writer.writerow([s1, s2, repr(gold), repr(prediction)])
        timer.counts.update({'pairs': len(rows)})
        self.stdout.write(f'pearson_r,{r!r}')
