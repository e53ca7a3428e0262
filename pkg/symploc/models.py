"""
Run records for the symploc command.

One ExperimentRun row per subcommand invocation when SYMPLOC_RECORD_RUNS is on:
the effective config, the flag overrides, the outcome and the artifact paths.
"""

from django.db import models


class ExperimentRun(models.Model):
    """A single gen-data / train / eval / grad-check / verify invocation."""

    SUBCOMMAND_CHOICES = [
        ('gen-data', 'Generate dataset'),
        ('train', 'Train'),
        ('eval', 'Evaluate'),
        ('grad-check', 'Gradient check'),
        ('verify', 'Verify invariants'),
    ]
    STATUS_CHOICES = [
        ('running', 'Running'),
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    subcommand = models.CharField(max_length=20, choices=SUBCOMMAND_CHOICES)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='running')
    exit_code = models.IntegerField(null=True, blank=True)
    config = models.JSONField(default=dict, help_text="Effective run config after all overrides")
    overrides = models.JSONField(default=dict, blank=True, help_text="key=value pairs passed with --set")
    config_source = models.CharField(max_length=500, blank=True)
    metrics = models.JSONField(default=dict, blank=True)
    artifacts = models.JSONField(default=list, blank=True, help_text="Paths written by the run")
    error_message = models.TextField(blank=True)
    elapsed_ms = models.IntegerField(null=True, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-created_at']
        indexes = [
            models.Index(fields=['subcommand', 'status'], name='symploc_run_subcmd_status_idx'),
        ]

    def __str__(self):
        return f"{self.subcommand} #{self.pk} ({self.status})"

    @property
    def completed(self) -> bool:
        return self.status == 'completed'
