"""
URL configuration for NormLab project: the admin, which lists recorded
training runs.
"""
from django.contrib import admin
from django.urls import path

urlpatterns = [
    path('admin/', admin.site.urls),
]
