"""
Knowledge-overshadowing detection.

GaP adds Gaussian noise to the input embeddings of one keyphrase at a time,
reruns the model and compares the temporally pooled output distribution
with the unperturbed one. The keyphrase whose perturbation changes the
output least (highest cosine similarity) is reported as overshadowed.
CoDA is the token-removal baseline: the keyphrase is deleted instead of
perturbed.
"""
import logging
import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .backend import EmbeddingMatrix
from .errors import DetectionError, DomainError, InputError, NoCandidates
from .keyphrase import build_candidates, locate_phrases
from .utils import read_json

logger = logging.getLogger(__name__)

GAP = "GaP"
CODA = "CoDA"


@dataclass(frozen=True)
class KeyphraseScore:
    keyphrase: object
    similarity: object  # float, or None when the score is undefined (CoDA)


@dataclass(frozen=True)
class OvershadowReport:
    query: str
    per_keyphrase: tuple
    selected: object
    method: str

    def similarities(self):
        return [score.similarity for score in self.per_keyphrase]

    def to_json(self, query_id=None):
        return {
            "query_id": query_id,
            "method": self.method,
            "selected": self.selected.text,
            "scores": [
                {"keyphrase": score.keyphrase.text, "similarity": score.similarity}
                for score in self.per_keyphrase
            ],
        }


def noise_stream(noise_seed, candidate_index):
    """Independent Gaussian stream per candidate, stable under any scheduling."""
    return np.random.default_rng([noise_seed, candidate_index])


def perturb(embeddings, token_span, sigma, rng):
    """Add N(0, sigma^2) noise, i.i.d. per element, to the rows in token_span."""
    start, end = token_span
    if not 0 <= start < end <= embeddings.rows:
        raise InputError(f"token span {token_span} outside [0, {embeddings.rows})")
    if sigma < 0:
        raise InputError("sigma must be nonnegative")
    values = embeddings.values.copy()
    if sigma > 0:
        values[start:end] += rng.normal(0.0, sigma, size=(end - start, embeddings.cols))
    return EmbeddingMatrix(values)


def pool(dist):
    """Temporal average pooling over generation steps."""
    return dist.values.mean(axis=0)


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError(f"cosine needs equal-length vectors, got {a.shape} and {b.shape}")
    aa = float(a @ a)
    bb = float(b @ b)
    if aa == 0.0 or bb == 0.0:
        raise DomainError("cosine similarity of a zero vector is undefined")
    # sqrt(aa * bb) rather than sqrt(aa) * sqrt(bb) keeps cosine(v, v) == 1.0 exactly.
    value = float(a @ b) / math.sqrt(aa * bb)
    return min(1.0, max(-1.0, value))


def select_overshadowed(query, candidates, similarities, method):
    """Argmax over defined similarities; ties go to the earliest candidate."""
    best_index, best_value = None, None
    for index, value in enumerate(similarities):
        if value is None:
            continue
        if best_value is None or value > best_value:
            best_index, best_value = index, value
    if best_index is None:
        raise DetectionError(f"{method}: no candidate of {query!r} has a defined score")
    scores = tuple(KeyphraseScore(c, s) for c, s in zip(candidates, similarities))
    return OvershadowReport(query, scores, candidates[best_index], method)


class Detector(ABC):
    method = None

    @abstractmethod
    def detect(self, query, candidates, backend):
        """Return the OvershadowReport for `candidates` of `query`."""

    @staticmethod
    def _require(candidates):
        if candidates is None or len(candidates) == 0:
            raise NoCandidates("detection needs at least one candidate")


class GapDetector(Detector):
    method = GAP

    def __init__(self, config):
        self.config = config

    def detect(self, query, candidates, backend):
        self._require(candidates)
        cfg = self.config
        embeddings = backend.embed(candidates.tokenized.token_ids)
        reference = pool(backend.forward_distributions(embeddings, cfg.max_steps))

        def score(index):
            rng = noise_stream(cfg.noise_seed, index)
            span = candidates[index].token_span
            draws = []
            for _ in range(cfg.noise_samples):
                perturbed = perturb(embeddings, span, cfg.sigma, rng)
                draws.append(cosine(reference, pool(backend.forward_distributions(perturbed, cfg.max_steps))))
            return math.fsum(draws) / len(draws)

        similarities = _fan_out(score, len(candidates), cfg.workers)
        report = select_overshadowed(query, candidates.candidates, similarities, self.method)
        logger.debug("GaP on %r selected %r", query, report.selected.text)
        return report


class CodaDetector(Detector):
    method = CODA

    def __init__(self, config):
        self.config = config

    def detect(self, query, candidates, backend):
        self._require(candidates)
        cfg = self.config
        embeddings = backend.embed(candidates.tokenized.token_ids)
        reference = pool(backend.forward_distributions(embeddings, cfg.max_steps))

        def score(index):
            start, end = candidates[index].token_span
            remaining = np.delete(embeddings.values, np.s_[start:end], axis=0)
            if remaining.shape[0] == 0:
                logger.debug("CoDA: removing %r empties the query", candidates[index].text)
                return None
            dist = backend.forward_distributions(EmbeddingMatrix(remaining), cfg.max_steps)
            return cosine(reference, pool(dist))

        similarities = _fan_out(score, len(candidates), cfg.workers)
        if all(value is None for value in similarities):
            raise DetectionError(f"CoDA: removing any candidate of {query!r} leaves an empty query")
        return select_overshadowed(query, candidates.candidates, similarities, self.method)


class ScriptedDetector(Detector):
    """
    Replays externally supplied keyphrase scores, e.g. a published score
    table. The scripted phrases, located in the query, become the candidate
    set. Queries missing from the table go to `fallback` when one is given.
    """

    def __init__(self, table, method=GAP, fallback=None):
        self.table = {query: dict(scores) for query, scores in table.items()}
        self.method = method
        self.fallback = fallback

    @classmethod
    def from_file(cls, path, fallback=None):
        data = read_json(path)
        return cls(data.get("queries", {}), method=data.get("method", GAP), fallback=fallback)

    def detect(self, query, candidates, backend):
        scores = self.table.get(query)
        if scores is None:
            if self.fallback is None:
                raise DetectionError(f"no scripted scores for query {query!r}")
            return self.fallback.detect(query, candidates, backend)
        tokenized = candidates.tokenized if candidates is not None else backend.tokenize(query)
        scripted = build_candidates(query, tokenized, locate_phrases(query, list(scores)))
        by_text = {phrase.lower(): value for phrase, value in scores.items()}
        similarities = [float(by_text[c.text.lower()]) for c in scripted]
        return select_overshadowed(query, scripted.candidates, similarities, self.method)


def _fan_out(fn, count, workers):
    if workers <= 1 or count <= 1:
        return [fn(index) for index in range(count)]
    with ThreadPoolExecutor(max_workers=min(workers, count)) as pool_:
        return list(pool_.map(fn, range(count)))


def detect_gap(query, candidates, backend, cfg):
    return GapDetector(cfg).detect(query, candidates, backend)


def detect_coda(query, candidates, backend, cfg):
    return CodaDetector(cfg).detect(query, candidates, backend)


def detector_for(method, config):
    """Detector for a pipeline method name ('gap', 'coda' or 'none')."""
    method = method.lower()
    if method == "none":
        computed = None
    elif method == "gap":
        computed = GapDetector(config)
    elif method == "coda":
        computed = CodaDetector(config)
    else:
        raise InputError(f"unknown detection method {method!r}")
    if config.scores_path is not None:
        return ScriptedDetector.from_file(config.scores_path, fallback=computed)
    return computed
