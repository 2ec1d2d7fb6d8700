"""
Shared base for the pipeline management commands.

Every stage command accepts ``--config``, ``--seed``, ``--threads`` and
``--out-dir``, echoes the effective configuration into the output directory
and turns application errors into exit statuses 1 (usage), 2 (data) and
3 (numeric failure).
"""
import logging
import sys
from typing import Any, Dict, Optional, Tuple

import torch
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError, CommandParser

from .exceptions import EXIT_DATA, EXIT_USAGE, BaseApplicationError
from .experiment import ExperimentConfig, load_experiment
from .monitoring import StageTimer


logger = logging.getLogger(__name__)


class UsageParser(CommandParser):
    """Argument errors exit with the usage status instead of argparse's 2."""

    def error(self, message):
        if self.called_from_command_line:
            self.print_usage(sys.stderr)
            self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")
        raise CommandError(f"Error: {message}", returncode=EXIT_USAGE)


class ExperimentCommand(BaseCommand):
    """
    Base class for pipeline stages.

    Subclasses set ``stage``, add their own flags in ``add_stage_arguments``
    and implement ``run``. ``config_flags`` maps option names to the
    ``(section, key)`` they override in the experiment config.
    """
    requires_system_checks = []
    stage = ''
    config_flags: Dict[str, Tuple[str, str]] = {}

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.__class__ = UsageParser
        return parser

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Experiment INI file')
        parser.add_argument('--seed', type=int, help='Global seed (overrides the config file)')
        parser.add_argument('--threads', type=int, help='Worker threads (overrides the config file)')
        parser.add_argument('--out-dir', help='Output directory (overrides the config file)')
        self.add_stage_arguments(parser)

    def add_stage_arguments(self, parser):
        pass

    def overrides(self, options: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
        sections: Dict[str, Dict[str, Any]] = {}
        for option, (section, key) in self.config_flags.items():
            if options.get(option) is not None:
                sections.setdefault(section, {})[key] = options[option]
        return sections

    def handle(self, *args, **options):
        torch.set_num_threads(settings.MEDSEARCH_TORCH_THREADS)
        try:
            experiment = load_experiment(
                options.get('config'),
                seed=options.get('seed'),
                threads=options.get('threads'),
                out_dir=options.get('out_dir'),
                overrides=self.overrides(options),
            )
            experiment.write_effective()
            with StageTimer(self.stage) as timer:
                self.run(experiment, timer, **options)
        except BaseApplicationError as e:
            raise CommandError(self.describe(e), returncode=e.exit_code)
        except OSError as e:
            logger.error(f"{self.stage}: {e}")
            raise CommandError(f"[{self.stage}] {e}", returncode=EXIT_DATA)

    def describe(self, error: BaseApplicationError) -> str:
        where = error.location()
        suffix = f" ({where})" if where and where not in error.message else ''
        return f"[{self.stage}] {error.error_code}: {error.message}{suffix}"

    def run(self, experiment: ExperimentConfig, timer: StageTimer, **options) -> None:
        raise NotImplementedError

    def success(self, message: str, path: Optional[Any] = None) -> None:
        self.stdout.write(self.style.SUCCESS(message + (f" -> {path}" if path else '')))
