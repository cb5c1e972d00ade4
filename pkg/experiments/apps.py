"""
Application configuration for the experiments app.
"""
from django.apps import AppConfig


class ExperimentsConfig(AppConfig):
    """
    Command-line surface of the lab: experiment configs, run records and
    the management commands that emit every artifact.
    """
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'experiments'
    verbose_name = 'Experiments'
