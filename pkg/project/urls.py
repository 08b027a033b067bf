"""
URL configuration for the actishade project.

The toy model backend is mounted at the root; see actishade/urls.py for the
protocol endpoints.
"""
from django.urls import path, include

urlpatterns = [
    path('', include('actishade.urls')),
]
