from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(max_length=200)),
                ('topology', models.CharField(choices=[('pre_norm', 'Pre-Norm'), ('post_norm', 'Post-Norm'), ('deep_norm', 'DeepNorm'), ('residual', 'ResiDual'), ('hybrid_norm', 'HybridNorm'), ('hybrid_residual', 'HybridNorm-ResiDual'), ('siamese_canonical', 'SiameseNorm (canonical)'), ('siamese_practical', 'SiameseNorm (practical)')], max_length=32)),
                ('peak_lr', models.FloatField()),
                ('status', models.CharField(choices=[('converged', 'Converged'), ('diverged', 'Diverged'), ('spike_detected', 'Spike detected')], max_length=20)),
                ('final_loss', models.FloatField(blank=True, null=True)),
                ('eval_acc', models.FloatField(blank=True, null=True)),
                ('eval_loss', models.FloatField(blank=True, null=True)),
                ('diverged_step', models.PositiveIntegerField(blank=True, null=True)),
                ('output_dir', models.CharField(max_length=500)),
                ('config', models.JSONField(default=dict)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
