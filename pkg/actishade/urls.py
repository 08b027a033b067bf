"""
Backend wire protocol, version 1. Field names are part of the protocol and
must not change.
"""
from django.urls import path
from . import views

urlpatterns = [
    path('v1/tokenize', views.tokenize_view, name='tokenize'),
    path('v1/embed', views.embed_view, name='embed'),
    path('v1/forward', views.forward_view, name='forward'),
    path('v1/next_token', views.next_token_view, name='next_token'),
    path('v1/generate', views.generate_view, name='generate'),
    path('v1/info', views.info_view, name='info'),
    path('v1/vocab', views.vocab_view, name='vocab'),
]
