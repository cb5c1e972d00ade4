from django.db import models

from topologies.kinds import TopologyKind


class TrainingRun(models.Model):
    STATUS_CHOICES = [
        ('converged', 'Converged'),
        ('diverged', 'Diverged'),
        ('spike_detected', 'Spike detected'),
        ('failed', 'Failed'),
    ]

    name = models.CharField(max_length=200)
    topology = models.CharField(max_length=32, choices=TopologyKind.choices())
    peak_lr = models.FloatField()
    status = models.CharField(max_length=20, choices=STATUS_CHOICES)
    final_loss = models.FloatField(null=True, blank=True)
    eval_acc = models.FloatField(null=True, blank=True)
    eval_loss = models.FloatField(null=True, blank=True)
    diverged_step = models.PositiveIntegerField(null=True, blank=True)
    output_dir = models.CharField(max_length=500)
    config = models.JSONField(default=dict)
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    def __str__(self):
        return f"{self.name} ({self.topology} @ {self.peak_lr:g}): {self.status}"

    class Meta:
        ordering = ['-created_at']
