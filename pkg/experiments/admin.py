from django.contrib import admin
from unfold.admin import ModelAdmin

from .models import TrainingRun


@admin.register(TrainingRun)
class TrainingRunAdmin(ModelAdmin):
    list_display = ('name', 'topology', 'peak_lr', 'status', 'final_loss', 'eval_acc', 'created_at')
    list_filter = ('topology', 'status')
    search_fields = ('name', 'output_dir')
    date_hierarchy = 'created_at'
    readonly_fields = ('created_at', 'updated_at')
