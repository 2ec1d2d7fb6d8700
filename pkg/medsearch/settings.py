"""
Django settings for the medsearch project.

The project has no web surface: Django provides the settings layer, the
logging configuration and the management-command runner that drives the
retrieval pipeline (``python manage.py <command>``).
"""

import os
from pathlib import Path

from decouple import Csv, config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = config("SECRET_KEY", default="medsearch-local-only")
DEBUG = config("DEBUG", default=False, cast=bool)
ALLOWED_HOSTS = config("ALLOWED_HOSTS", default="localhost,127.0.0.1", cast=Csv())


# Application definition

INSTALLED_APPS = [
    # Project apps
    "encoder",
    "training",
    "retrieval",
    "logkit",
    "evalkit",
]

# No ORM models: all artifacts are files in the experiment output directory.
DATABASES = {}

USE_TZ = True
TIME_ZONE = "UTC"

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"


# Experiment defaults (overridable per run by the INI config and CLI flags)
MEDSEARCH_SEED = config("MEDSEARCH_SEED", default=13, cast=int)
MEDSEARCH_THREADS = config("MEDSEARCH_THREADS", default=1, cast=int)
MEDSEARCH_OUT_DIR = Path(config("MEDSEARCH_OUT_DIR", default=str(BASE_DIR / "runs" / "default")))
MEDSEARCH_TORCH_THREADS = config("MEDSEARCH_TORCH_THREADS", default=1, cast=int)

# Maximum JSON-lines record size accepted by the validators
MAX_JSONL_RECORD_BYTES = config("MAX_JSONL_RECORD_BYTES", default=1024 * 1024, cast=int)

LOG_DIR = Path(config("LOG_DIR", default=str(BASE_DIR / "logs")))
LOG_LEVEL = config("LOG_LEVEL", default="INFO")

# Logging Configuration
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{levelname} {asctime} {module} {process:d} {thread:d} {message}",
            "style": "{",
        },
        "simple": {
            "format": "{levelname} {message}",
            "style": "{",
        },
        "json": {
            "format": "{levelname} {asctime} {module} {message}",
            "style": "{",
        },
    },
    "handlers": {
        "file": {
            "level": LOG_LEVEL,
            "class": "logging.handlers.RotatingFileHandler",
            "filename": LOG_DIR / "medsearch.log",
            "maxBytes": 1024 * 1024 * 15,  # 15MB
            "backupCount": 10,
            "formatter": "verbose",
        },
        "error_file": {
            "level": "ERROR",
            "class": "logging.handlers.RotatingFileHandler",
            "filename": LOG_DIR / "errors.log",
            "maxBytes": 1024 * 1024 * 15,  # 15MB
            "backupCount": 10,
            "formatter": "json",
        },
        "console": {
            "level": config("CONSOLE_LOG_LEVEL", default="WARNING"),
            "class": "logging.StreamHandler",
            "formatter": "simple",
        },
    },
    "loggers": {
        "medsearch": {
            "handlers": ["file", "console", "error_file"],
            "level": LOG_LEVEL,
            "propagate": False,
        },
        "encoder": {
            "handlers": ["file", "console", "error_file"],
            "level": LOG_LEVEL,
            "propagate": False,
        },
        "training": {
            "handlers": ["file", "console", "error_file"],
            "level": LOG_LEVEL,
            "propagate": False,
        },
        "retrieval": {
            "handlers": ["file", "console", "error_file"],
            "level": LOG_LEVEL,
            "propagate": False,
        },
        "logkit": {
            "handlers": ["file", "console", "error_file"],
            "level": LOG_LEVEL,
            "propagate": False,
        },
        "evalkit": {
            "handlers": ["file", "console", "error_file"],
            "level": LOG_LEVEL,
            "propagate": False,
        },
    },
}

# Create logs directory if it doesn't exist
os.makedirs(LOG_DIR, exist_ok=True)
