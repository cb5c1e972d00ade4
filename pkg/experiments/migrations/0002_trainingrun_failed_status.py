from django.db import migrations, models


class Migration(migrations.Migration):

    dependencies = [
        ('experiments', '0001_initial'),
    ]

    operations = [
        migrations.AlterField(
            model_name='trainingrun',
            name='status',
            field=models.CharField(choices=[('converged', 'Converged'), ('diverged', 'Diverged'), ('spike_detected', 'Spike detected'), ('failed', 'Failed')], max_length=20),
        ),
    ]
