"""
Django settings for the actishade project.

The project hosts the toy model backend over HTTP and the `actishade`
management command that fronts every workflow.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.1/ref/settings/
"""
import os
from dotenv import load_dotenv
load_dotenv()

from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get(
    'DJANGO_SECRET_KEY',
    'django-insecure-actishade-toy-backend-not-for-production',
)

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = os.environ.get('DJANGO_DEBUG', 'false').lower() in ('1', 'true', 'yes')

ALLOWED_HOSTS = ['localhost', '127.0.0.1', '[::1]', 'testserver']


# Application definition

INSTALLED_APPS = [
    'actishade.apps.ActishadeConfig',
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.middleware.common.CommonMiddleware',
]

ROOT_URLCONF = 'project.urls'

WSGI_APPLICATION = 'project.wsgi.application'


# Database
# The toy backend is stateless; the database only backs Django's test runner.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Required by LiveServerTestCase's static-files handler; no static files are served.
STATIC_URL = 'static/'


# ActiShade defaults read from the environment. Experiment config files and
# command-line flags override these, in that order.

ACTISHADE = {
    'BACKEND_ENDPOINT': os.environ.get('ACTISHADE_BACKEND_ENDPOINT', 'in-process'),
    'SEED': int(os.environ.get('ACTISHADE_SEED', '42')),
    'OUTPUT_DIR': Path(os.environ.get('ACTISHADE_OUTPUT_DIR', BASE_DIR / 'runs')),
    'PROMPTS_DIR': BASE_DIR / 'actishade' / 'prompts',
}


# Logging

LOG_LEVEL = os.environ.get('ACTISHADE_LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '%(asctime)s %(levelname)s %(name)s %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'actishade': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}
