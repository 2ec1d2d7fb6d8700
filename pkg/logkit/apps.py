from django.apps import AppConfig


class LogkitConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'logkit'
    verbose_name = 'Click-log generation and curation'
