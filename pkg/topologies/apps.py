from django.apps import AppConfig


class TopologiesConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'topologies'
    verbose_name = 'Normalization Topologies'
