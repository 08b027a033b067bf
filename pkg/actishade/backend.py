"""
Model-backend protocol: domain types and clients.

Both clients speak the same JSON payloads. `LocalBackend` hands them to the
toy model dispatcher in-process, `HttpBackend` posts them to a server
(see `actishade.views`). Every typed operation is implemented once, in
`Backend`, on top of the raw `request`.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property

import httpx
import numpy as np

from .errors import InputError, TransportError
from .toy import ToyModel, dispatch

logger = logging.getLogger(__name__)

PROB_TOLERANCE = 1e-6
GET_ENDPOINTS = frozenset({"info", "vocab"})


@dataclass(frozen=True)
class TokenizedText:
    text: str
    token_ids: tuple
    offsets: tuple

    def __post_init__(self):
        if len(self.token_ids) != len(self.offsets):
            raise InputError("token_ids and offsets differ in length")
        previous_end = 0
        for start, end in self.offsets:
            if not 0 <= start < end <= len(self.text):
                raise InputError(f"offset [{start}, {end}) outside text bounds")
            if start < previous_end:
                raise InputError("offsets overlap or are not increasing")
            previous_end = end

    def __len__(self):
        return len(self.token_ids)

    def token_text(self, index):
        start, end = self.offsets[index]
        return self.text[start:end]


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise InputError("embedding matrix must be T x d with T >= 1")
        if not np.all(np.isfinite(values)):
            raise InputError("embedding matrix has non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    def to_payload(self):
        return {"rows": self.rows, "cols": self.cols, "values": self.values.ravel().tolist()}

    @classmethod
    def from_payload(cls, payload):
        return cls(np.asarray(payload["values"], dtype=np.float64).reshape(payload["rows"], payload["cols"]))


@dataclass(frozen=True, eq=False)
class StepDistributions:
    values: np.ndarray
    produced_token_ids: tuple

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1:
            raise InputError("step distributions must be G x V with G >= 1")
        if len(self.produced_token_ids) != values.shape[0]:
            raise InputError("one produced token per step is required")
        if (values < 0).any():
            raise InputError("probabilities must be nonnegative")
        if not np.allclose(values.sum(axis=1), 1.0, rtol=0, atol=PROB_TOLERANCE):
            raise InputError("every step distribution must sum to 1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "produced_token_ids", tuple(self.produced_token_ids))

    @property
    def steps(self):
        return self.values.shape[0]

    @property
    def vocab(self):
        return self.values.shape[1]

    @classmethod
    def from_payload(cls, payload):
        values = np.asarray(payload["values"], dtype=np.float64).reshape(payload["steps"], payload["vocab"])
        return cls(values, tuple(payload["produced_token_ids"]))


class Backend(ABC):
    """Typed model operations over a JSON request/response transport."""

    default_max_steps = 32

    @abstractmethod
    def request(self, endpoint, payload=None):
        """Send one protocol request and return the decoded JSON response."""

    def tokenize(self, text):
        if not isinstance(text, str) or not text.strip():
            raise InputError("cannot tokenize empty text")
        response = self.request("tokenize", {"text": text})
        return TokenizedText(
            text=text,
            token_ids=tuple(response["token_ids"]),
            offsets=tuple((start, end) for start, end in response["offsets"]),
        )

    def embed(self, token_ids):
        response = self.request("embed", {"token_ids": [int(t) for t in token_ids]})
        return EmbeddingMatrix.from_payload(response)

    def forward_distributions(self, embeddings, max_steps):
        payload = embeddings.to_payload()
        payload["max_steps"] = int(max_steps)
        return StepDistributions.from_payload(self.request("forward", payload))

    def next_token_distribution(self, prompt):
        if not isinstance(prompt, str) or not prompt.strip():
            raise InputError("prompt must be non-empty")
        return np.asarray(self.request("next_token", {"prompt": prompt})["probs"], dtype=np.float64)

    def generate(self, prompt, max_steps=None):
        if not isinstance(prompt, str) or not prompt.strip():
            raise InputError("prompt must be non-empty")
        steps = self.default_max_steps if max_steps is None else int(max_steps)
        return self.request("generate", {"prompt": prompt, "max_steps": steps})["text"]

    @cached_property
    def info(self):
        return self.request("info")

    @cached_property
    def vocabulary(self):
        return tuple(self.request("vocab")["tokens"])


class LocalBackend(Backend):
    """In-process transport: payloads go straight to the toy dispatcher."""

    def __init__(self, model, max_steps=32):
        self.model = model
        self.default_max_steps = max_steps

    def request(self, endpoint, payload=None):
        return dispatch(self.model, endpoint, payload)

    def close(self):
        pass


class HttpBackend(Backend):
    """JSON-over-HTTP transport. One shared httpx.Client, safe across threads."""

    def __init__(self, endpoint, timeout=30.0, max_steps=32, transport=None):
        self.endpoint = endpoint.rstrip("/")
        self.default_max_steps = max_steps
        self._client = httpx.Client(base_url=self.endpoint, timeout=timeout, transport=transport)

    def request(self, endpoint, payload=None):
        path = f"/v1/{endpoint}"
        try:
            if endpoint in GET_ENDPOINTS:
                response = self._client.get(path)
            else:
                response = self._client.post(path, json=payload or {})
        except httpx.HTTPError as exc:
            raise TransportError(f"backend unreachable at {self.endpoint}{path}: {exc}") from exc

        if response.status_code == 400:
            raise InputError(self._error_message(response))
        if response.status_code >= 400:
            raise TransportError(f"{path} returned {response.status_code}: {self._error_message(response)}")
        try:
            return response.json()
        except ValueError as exc:
            raise TransportError(f"{path} returned a non-JSON body") from exc

    @staticmethod
    def _error_message(response):
        try:
            return response.json().get("error", response.text)
        except ValueError:
            return response.text

    def close(self):
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def connect(config):
    """Backend for a BackendConfig: the toy model in-process, or a remote server."""
    if config.in_process:
        logger.debug("using in-process toy backend (seed=%s)", config.seed)
        return LocalBackend(ToyModel.from_config(config), max_steps=config.max_steps)
    logger.debug("using HTTP backend at %s", config.endpoint)
    return HttpBackend(config.endpoint, timeout=config.request_timeout, max_steps=config.max_steps)
