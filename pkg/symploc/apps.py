from django.apps import AppConfig


class SymplocConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'symploc'
    verbose_name = 'SympLoc toy localization'
