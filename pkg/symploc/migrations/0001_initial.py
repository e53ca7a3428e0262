from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('subcommand', models.CharField(choices=[('gen-data', 'Generate dataset'), ('train', 'Train'), ('eval', 'Evaluate'), ('grad-check', 'Gradient check'), ('verify', 'Verify invariants')], max_length=20)),
                ('status', models.CharField(choices=[('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='running', max_length=20)),
                ('exit_code', models.IntegerField(blank=True, null=True)),
                ('config', models.JSONField(default=dict, help_text='Effective run config after all overrides')),
                ('overrides', models.JSONField(blank=True, default=dict, help_text='key=value pairs passed with --set')),
                ('config_source', models.CharField(blank=True, max_length=500)),
                ('metrics', models.JSONField(blank=True, default=dict)),
                ('artifacts', models.JSONField(blank=True, default=list, help_text='Paths written by the run')),
                ('error_message', models.TextField(blank=True)),
                ('elapsed_ms', models.IntegerField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['-created_at'],
                'indexes': [models.Index(fields=['subcommand', 'status'], name='symploc_run_subcmd_status_idx')],
            },
        ),
    ]
