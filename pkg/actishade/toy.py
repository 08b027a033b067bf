"""
Seeded toy language model and the wire-protocol dispatcher in front of it.

The model is a uniform(-0.1, 0.1) embedding table and a
single linear layer from the mean input embedding to vocabulary logits,
softmaxed. Perturbing any input row moves the mean, so Gaussian noise on a
keyphrase changes the output distribution continuously.

`dispatch` serves both the in-process backend and the HTTP views.
"""
import hashlib
import logging
import math
import re

import numpy as np
from scipy.special import softmax

from .errors import InputError
from .utils import read_json

logger = logging.getLogger(__name__)

MODEL_NAME = "actishade-toy-v1"

EOS_ID = 0
YES_ID = 1
NO_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("</s>", "Yes", "No", "<unk>")

_CHUNK = re.compile(r"\S+")


def _stable_hash(word):
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


class ToyModel:
    """Deterministic stand-in for an LLM. Parameters are immutable after init."""

    def __init__(self, vocab_size=512, embed_dim=32, seed=42, logit_scale=8.0, max_steps=32, script=None):
        if vocab_size < len(RESERVED_TOKENS):
            raise InputError(f"vocab_size must be >= {len(RESERVED_TOKENS)}, got {vocab_size}")
        if embed_dim < 1:
            raise InputError("embed_dim must be positive")
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.seed = seed
        self.logit_scale = float(logit_scale)
        self.max_steps = max_steps

        rng = np.random.default_rng(seed)
        self.embedding_table = rng.uniform(-0.1, 0.1, size=(vocab_size, embed_dim))
        self.output_weights = rng.uniform(-1.0, 1.0, size=(vocab_size, embed_dim))
        self.embedding_table.setflags(write=False)
        self.output_weights.setflags(write=False)

        self.vocabulary = RESERVED_TOKENS + tuple(f"tok{i}" for i in range(len(RESERVED_TOKENS), vocab_size))
        self._surface_ids = {surface: idx for idx, surface in enumerate(self.vocabulary)}
        self.script = {prompt: self._compile_entry(prompt, entry) for prompt, entry in (script or {}).items()}

    @classmethod
    def from_config(cls, config):
        script = None
        if config.script_path is not None:
            script = read_json(config.script_path).get("prompts", {})
            logger.info("loaded %d scripted prompts from %s", len(script), config.script_path)
        return cls(
            vocab_size=config.vocab_size,
            embed_dim=config.embed_dim,
            seed=config.seed,
            logit_scale=config.logit_scale,
            max_steps=config.max_steps,
            script=script,
        )

    def _compile_entry(self, prompt, entry):
        compiled = {"text": entry.get("text"), "probs": None}
        masses = entry.get("next_token")
        if masses:
            probs = np.zeros(self.vocab_size)
            free = np.ones(self.vocab_size, dtype=bool)
            for surface, mass in masses.items():
                if surface not in self._surface_ids:
                    raise InputError(f"scripted prompt {prompt[:40]!r}: unknown token {surface!r}")
                if mass < 0:
                    raise InputError(f"scripted prompt {prompt[:40]!r}: negative mass for {surface!r}")
                probs[self._surface_ids[surface]] = mass
                free[self._surface_ids[surface]] = False
            remainder = 1.0 - probs.sum()
            if remainder < -1e-9:
                raise InputError(f"scripted prompt {prompt[:40]!r}: masses sum above 1")
            if remainder > 0 and free.any():
                probs[free] = remainder / free.sum()
            if probs.sum() <= 0:
                raise InputError(f"scripted prompt {prompt[:40]!r}: no probability mass")
            compiled["probs"] = probs / probs.sum()
        return compiled

    # Tokenizer

    def token_id(self, word):
        lowered = word.lower()
        if lowered == "yes":
            return YES_ID
        if lowered == "no":
            return NO_ID
        reserved = len(RESERVED_TOKENS)
        if self.vocab_size == reserved:
            return UNK_ID
        return reserved + _stable_hash(lowered) % (self.vocab_size - reserved)

    def tokenize(self, text):
        if not isinstance(text, str) or not text.strip():
            raise InputError("text must be non-empty")
        token_ids, offsets = [], []
        for match in _CHUNK.finditer(text):
            token_ids.append(self.token_id(match.group()))
            offsets.append((match.start(), match.end()))
        return token_ids, offsets

    def detokenize(self, token_ids):
        return " ".join(self.vocabulary[idx] for idx in token_ids if idx != EOS_ID)

    # Model

    def embed(self, token_ids):
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise InputError("token_ids must be a non-empty sequence")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise InputError(f"token id out of range [0, {self.vocab_size})")
        return self.embedding_table[ids].copy()

    def step_distribution(self, mean):
        return softmax(self.logit_scale * (self.output_weights @ mean))

    def forward(self, embeddings, max_steps):
        """Greedy decode from input embeddings; returns (G x V probs, produced ids)."""
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or embeddings.shape[0] < 1:
            raise InputError("embeddings must be a non-empty matrix")
        if embeddings.shape[1] != self.embed_dim:
            raise InputError(f"embedding dimension {embeddings.shape[1]} != backend dimension {self.embed_dim}")
        if not np.all(np.isfinite(embeddings)):
            raise InputError("embeddings contain non-finite values")
        if max_steps < 1:
            raise InputError("max_steps must be >= 1")
        steps = min(int(max_steps), self.max_steps)

        total = embeddings.sum(axis=0)
        count = embeddings.shape[0]
        rows, produced = [], []
        for _ in range(steps):
            probs = self.step_distribution(total / count)
            token = int(np.argmax(probs))
            rows.append(probs)
            produced.append(token)
            if token == EOS_ID:
                break
            total = total + self.embedding_table[token]
            count += 1
        return np.vstack(rows), produced

    def next_token(self, prompt):
        if not isinstance(prompt, str) or not prompt.strip():
            raise InputError("prompt must be non-empty")
        entry = self.script.get(prompt)
        if entry is not None and entry["probs"] is not None:
            return entry["probs"].copy()
        token_ids, _ = self.tokenize(prompt)
        probs, _ = self.forward(self.embed(token_ids), 1)
        return probs[0]

    def generate(self, prompt, max_steps):
        if not isinstance(prompt, str) or not prompt.strip():
            raise InputError("prompt must be non-empty")
        entry = self.script.get(prompt)
        if entry is not None and entry["text"] is not None:
            return entry["text"]
        token_ids, _ = self.tokenize(prompt)
        _, produced = self.forward(self.embed(token_ids), max_steps)
        return self.detokenize(produced)


# Protocol

def _field(payload, name, kind):
    if not isinstance(payload, dict) or name not in payload:
        raise InputError(f"missing field '{name}'")
    value = payload[name]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise InputError(f"field '{name}' must be an integer")
    if kind is str and not isinstance(value, str):
        raise InputError(f"field '{name}' must be a string")
    if kind is list and not isinstance(value, list):
        raise InputError(f"field '{name}' must be a list")
    return value


def _matrix(payload):
    rows = _field(payload, "rows", int)
    cols = _field(payload, "cols", int)
    values = _field(payload, "values", list)
    if rows < 1 or cols < 1 or len(values) != rows * cols:
        raise InputError(f"values has {len(values)} entries, expected rows*cols = {rows * cols}")
    try:
        matrix = np.asarray(values, dtype=np.float64).reshape(rows, cols)
    except (TypeError, ValueError) as exc:
        raise InputError("values must be numbers") from exc
    if not all(math.isfinite(v) for v in matrix.ravel()):
        raise InputError("values must be finite")
    return matrix


def _tokenize(model, payload):
    token_ids, offsets = model.tokenize(_field(payload, "text", str))
    return {"token_ids": token_ids, "offsets": [list(span) for span in offsets]}


def _embed(model, payload):
    token_ids = _field(payload, "token_ids", list)
    if any(isinstance(t, bool) or not isinstance(t, int) for t in token_ids):
        raise InputError("token_ids must be integers")
    matrix = model.embed(token_ids)
    return {"rows": matrix.shape[0], "cols": matrix.shape[1], "values": matrix.ravel().tolist()}


def _forward(model, payload):
    probs, produced = model.forward(_matrix(payload), _field(payload, "max_steps", int))
    return {
        "steps": probs.shape[0],
        "vocab": probs.shape[1],
        "values": probs.ravel().tolist(),
        "produced_token_ids": produced,
    }


def _next_token(model, payload):
    return {"probs": model.next_token(_field(payload, "prompt", str)).tolist()}


def _generate(model, payload):
    text = model.generate(_field(payload, "prompt", str), _field(payload, "max_steps", int))
    return {"text": text}


def _info(model, payload):
    return {"vocab_size": model.vocab_size, "embed_dim": model.embed_dim, "model_name": MODEL_NAME}


def _vocab(model, payload):
    return {"tokens": list(model.vocabulary)}


HANDLERS = {
    "tokenize": _tokenize,
    "embed": _embed,
    "forward": _forward,
    "next_token": _next_token,
    "generate": _generate,
    "info": _info,
    "vocab": _vocab,
}


def dispatch(model, endpoint, payload):
    """Serve one protocol request; raises InputError on malformed input."""
    try:
        handler = HANDLERS[endpoint]
    except KeyError:
        raise InputError(f"unknown endpoint '{endpoint}'") from None
    return handler(model, payload if payload is not None else {})
