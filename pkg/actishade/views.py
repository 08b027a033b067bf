import json
import logging
import threading

from django.conf import settings
from django.http import JsonResponse
from django.views.decorators.csrf import csrf_exempt
from django.views.decorators.http import require_http_methods

from .config import BackendConfig
from .errors import InputError
from .toy import ToyModel, dispatch

logger = logging.getLogger(__name__)

_served_model = None
_model_lock = threading.Lock()


def install_model(model):
    """Serve `model` from now on (used by `actishade serve-backend`)."""
    global _served_model
    with _model_lock:
        _served_model = model


def served_model():
    global _served_model
    with _model_lock:
        if _served_model is None:
            config = BackendConfig(seed=settings.ACTISHADE.get('SEED', 42))
            _served_model = ToyModel.from_config(config)
            logger.info("built toy model (seed=%s, vocab=%s, dim=%s)",
                        config.seed, config.vocab_size, config.embed_dim)
        return _served_model


def json_error(message, status=400):
    return JsonResponse({'error': message}, status=status)


def _serve(endpoint, payload):
    try:
        return JsonResponse(dispatch(served_model(), endpoint, payload))
    except InputError as e:
        return json_error(str(e))
    except Exception as e:
        logger.exception("%s failed", endpoint)
        return json_error(f'{endpoint} error: {str(e)}', status=500)


def _post_view(endpoint):
    @csrf_exempt
    @require_http_methods(["POST"])
    def view(request):
        try:
            payload = json.loads(request.body)
        except (json.JSONDecodeError, UnicodeDecodeError):
            return json_error('Request body must be JSON')
        if not isinstance(payload, dict):
            return json_error('Request body must be a JSON object')
        return _serve(endpoint, payload)

    view.__name__ = f'{endpoint}_view'
    return view


tokenize_view = _post_view('tokenize')
embed_view = _post_view('embed')
forward_view = _post_view('forward')
next_token_view = _post_view('next_token')
generate_view = _post_view('generate')


@require_http_methods(["GET"])
def info_view(request):
    return _serve('info', {})


@require_http_methods(["GET"])
def vocab_view(request):
    return _serve('vocab', {})
