"""
Management command to re-rank a first-stage run with the cross-encoder
"""
from encoder.checkpoint import load_kind
from encoder.vocab import Vocabulary
from evalkit.trec import Run, load_run, write_run
from medsearch.commands import ExperimentCommand
from medsearch.corpus import load_corpus
from medsearch.exceptions import InvalidRecordError, get_error_context
from medsearch.validation import InputValidator

from retrieval.services import Reranker


class Command(ExperimentCommand):
    help = 'Reorder each query\'s candidates by cross-encoder score and write a TREC run'
    stage = 'rerank'

    def add_stage_arguments(self, parser):
        parser.add_argument('--run', help='First-stage run (default: run.trec in the output directory)')
        parser.add_argument('--queries', help='Query file (default: held-out queries in the output directory)')
        parser.add_argument('--output', help='Re-ranked run (default: reranked.trec in the output directory)')

    def run(self, experiment, timer, **options):
        queries_path = options.get('queries') or experiment.path('queries')
        texts = dict(InputValidator.read_tsv_pairs(queries_path))
        first_stage = load_run(options.get('run') or experiment.path('run'))
        missing = sorted(qid for qid in first_stage if qid not in texts)
        if missing:
            raise InvalidRecordError(
                message=f"{len(missing)} run queries have no text in {queries_path} (first: {missing[0]})",
                context=get_error_context(stage='rerank', path=queries_path, qid=missing[0])
            )

        reranker = Reranker(load_kind(experiment.path('reranker'), 'reranker'),
                            Vocabulary.load(experiment.path('vocab')),
                            load_corpus(experiment.path('corpus')))
        run = Run(reranker.rerank(texts[qid], first_stage[qid]) for qid in first_stage)

        output = write_run(run, options.get('output') or experiment.path('reranked_run'))
        timer.counts.update({'queries': len(run)})
        self.success(f'{len(run)} queries re-ranked', output)
