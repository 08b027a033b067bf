from django.apps import AppConfig


class ActishadeConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'actishade'
    verbose_name = 'ActiShade retrieval-augmented reasoning'
