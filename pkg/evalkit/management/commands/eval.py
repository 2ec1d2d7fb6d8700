"""
Management command to score a TREC run against qrels
"""
from pathlib import Path

from medsearch.commands import ExperimentCommand

from evalkit.services import evaluate
from evalkit.trec import load_qrels, load_run


class Command(ExperimentCommand):
    help = 'Compute NDCG@k and MAP@k, print the metric CSV and write it with per-query scores'
    stage = 'eval'
    config_flags = {'ks': ('experiment', 'eval_ks')}

    def add_stage_arguments(self, parser):
        parser.add_argument('--run', help='Run file (default: run.trec in the output directory)')
        parser.add_argument('--qrels', help='Qrels file (default: held-out qrels in the output directory)')
        parser.add_argument('--ks', help='Comma-separated cutoffs, e.g. 5,10,15')
        parser.add_argument('--metrics', default='ndcg,map', help='Comma-separated metrics (ndcg, map)')
        parser.add_argument('--qid-prefix', default='', help='Only score queries whose id starts with this prefix')
        parser.add_argument('--output', help='Metric CSV (default: metrics.csv in the output directory)')

    def run(self, experiment, timer, **options):
        qrels = load_qrels(options.get('qrels') or experiment.path('qrels'))
        if options['qid_prefix']:
            qrels = qrels.restrict(options['qid_prefix'])
        run = load_run(options.get('run') or experiment.path('run'))
        metrics = [name.strip() for name in options['metrics'].split(',') if name.strip()]

        report = evaluate(run, qrels, experiment.eval_ks, metrics)
        output = Path(options.get('output') or experiment.path('metrics'))
        report.write(output, output.with_name(output.stem + '_per_query.csv'))
        timer.counts.update({'queries': len(qrels.judged_queries())})

        self.stdout.write(output.read_text(encoding='utf-8'), ending='')
