"""
Keyphrase-conditioned dense retrieval.

Training data comes from MuSiQue decompositions: the first sub-question's
supporting paragraph is the positive, later sub-questions' paragraphs are
semi-positives and everything else in the pool is negative. The encoder is
a linear projection of hashed bag-of-words features shared by the query and
document towers, trained with plain SGD on a weighted three-tier
contrastive loss whose gradients are derived analytically.
"""
import hashlib
import io
import json
import logging
import math
import re
import zipfile
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.special import logsumexp
from tqdm import tqdm

from .errors import DomainError, InputError, MalformedRecord, TrainingError
from .keyphrase import HeuristicAnnotator
from .utils import atomic_write_bytes, atomic_write_jsonl, atomic_write_text, load_stopwords, read_json, read_jsonl

logger = logging.getLogger(__name__)

PARAMS_VERSION = 1
HASHED_TOKEN = "hashed-token"
EXTERNAL = "external"
DEFAULT_D_IN = 4096
DOCUMENT_TOKEN_LIMIT = 512
SIM_TOLERANCE = 1e-9

_TOKEN = re.compile(r"[a-z0-9]+")


# Domain types

@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise InputError(f"document {self.id!r} has empty text")

    def to_json(self):
        return {"id": self.id, "title": self.title, "text": self.text}

    @classmethod
    def from_json(cls, record):
        try:
            return cls(str(record["id"]), record.get("title", ""), record["text"])
        except KeyError as exc:
            raise MalformedRecord(f"document record missing {exc}") from exc


@dataclass(frozen=True)
class TieredExample:
    query: str
    keyphrase: str
    positive_id: str
    semi_positive_ids: tuple = ()
    negative_ids: tuple = ()

    def __post_init__(self):
        semi, neg = set(self.semi_positive_ids), set(self.negative_ids)
        if self.positive_id in semi or self.positive_id in neg or semi & neg:
            raise InputError(f"tiers of example {self.query!r} overlap")

    @property
    def document_ids(self):
        return (self.positive_id, *self.semi_positive_ids, *self.negative_ids)

    def to_json(self):
        return {
            "query": self.query,
            "keyphrase": self.keyphrase,
            "positive_id": self.positive_id,
            "semi_positive_ids": list(self.semi_positive_ids),
            "negative_ids": list(self.negative_ids),
        }

    @classmethod
    def from_json(cls, record):
        try:
            return cls(
                record["query"],
                record["keyphrase"],
                str(record["positive_id"]),
                tuple(str(i) for i in record.get("semi_positive_ids", ())),
                tuple(str(i) for i in record.get("negative_ids", ())),
            )
        except KeyError as exc:
            raise MalformedRecord(f"tiered example missing {exc}") from exc


@dataclass(eq=False)
class EncoderParams:
    projection: np.ndarray
    hash_seed: int = 0
    feature_space: str = HASHED_TOKEN
    temperature: float = 1.0

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.projection.ndim != 2 or self.projection.shape[0] < 2:
            raise InputError("projection must be d_out x d_in with d_out >= 2")
        if not np.all(np.isfinite(self.projection)):
            raise InputError("projection has non-finite entries")
        if self.feature_space not in (HASHED_TOKEN, EXTERNAL):
            raise InputError(f"unknown feature space {self.feature_space!r}")

    @property
    def d_out(self):
        return self.projection.shape[0]

    @property
    def d_in(self):
        return self.projection.shape[1]

    def to_json(self):
        return {
            "version": PARAMS_VERSION,
            "feature_space": self.feature_space,
            "d_in": self.d_in,
            "d_out": self.d_out,
            "hash_seed": self.hash_seed,
            "temperature": self.temperature,
            "projection": self.projection.ravel().tolist(),
        }

    @classmethod
    def from_json(cls, data):
        if data.get("version") != PARAMS_VERSION:
            raise InputError(f"unsupported params version {data.get('version')!r}")
        projection = np.asarray(data["projection"], dtype=np.float64).reshape(data["d_out"], data["d_in"])
        return cls(projection, data.get("hash_seed", 0), data.get("feature_space", HASHED_TOKEN),
                   data.get("temperature", 1.0))


def save_params(path, params):
    return atomic_write_text(path, json.dumps(params.to_json(), separators=(",", ":")) + "\n")


def load_params(path):
    return EncoderParams.from_json(read_json(path))


@dataclass(frozen=True, eq=False)
class Index:
    doc_ids: tuple
    matrix: np.ndarray

    def __post_init__(self):
        if len(self.doc_ids) != self.matrix.shape[0]:
            raise InputError("index rows and doc_ids differ in length")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise InputError("duplicate document ids in index")
        norms = np.linalg.norm(self.matrix, axis=1)
        if not np.allclose(norms, 1.0, rtol=0, atol=1e-6):
            raise InputError("index rows must be unit-norm")

    def __len__(self):
        return len(self.doc_ids)


def save_index(path, index):
    buffer = io.BytesIO()
    np.savez(buffer, doc_ids=np.array(index.doc_ids, dtype=str), matrix=index.matrix)
    return atomic_write_bytes(path, buffer.getvalue())


def load_index(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    try:
        with np.load(path) as data:
            doc_ids = tuple(str(i) for i in data["doc_ids"])
            matrix = np.asarray(data["matrix"], dtype=np.float64)
    except (OSError, EOFError, KeyError, TypeError, ValueError, zipfile.BadZipFile) as exc:
        raise MalformedRecord(f"{path}: unreadable index ({exc})") from exc
    if matrix.ndim != 2:
        raise MalformedRecord(f"{path}: index matrix must be 2-D, got shape {matrix.shape}")
    return Index(doc_ids, matrix)


@dataclass(frozen=True)
class RetrievalHit:
    doc_id: str
    score: float


@dataclass(frozen=True)
class Retrieval:
    hits: tuple
    truncated: bool = False

    def __iter__(self):
        return iter(self.hits)

    def __len__(self):
        return len(self.hits)

    @property
    def doc_ids(self):
        return [hit.doc_id for hit in self.hits]


# MuSiQue labelling

def paragraph_id(record_id, idx):
    return f"{record_id}:{idx}" if record_id else str(idx)


def extract_subject(sub_question):
    """Subject entity of a MuSiQue sub-question ("<subject> >> <relation>")."""
    if ">>" in sub_question:
        subject = sub_question.split(">>", 1)[0].strip()
        if subject:
            return subject
    spans = HeuristicAnnotator().spans(sub_question)
    if not spans:
        raise MalformedRecord(f"no subject entity in sub-question {sub_question!r}")
    capitalized = [s for s in spans if s[2] == "PROPN"] or spans
    start, end, _ = max(capitalized, key=lambda s: (s[1] - s[0], -s[0]))
    return sub_question[start:end]


def label_musique(record):
    try:
        question = record["question"]
        steps = record["question_decomposition"]
        paragraphs = record["paragraphs"]
    except KeyError as exc:
        raise MalformedRecord(f"MuSiQue record missing field {exc}") from exc
    if not steps:
        raise MalformedRecord("MuSiQue record has no decomposition steps")

    pool = [int(p["idx"]) for p in paragraphs]
    supports = []
    for number, step in enumerate(steps, start=1):
        idx = step.get("paragraph_support_idx")
        if idx is None or int(idx) not in pool:
            raise MalformedRecord(f"sub-question {number} has missing support index {idx!r}")
        supports.append(int(idx))

    record_id = record.get("id")
    positive = supports[0]
    semi = []
    for idx in supports[1:]:
        if idx != positive and idx not in semi:
            semi.append(idx)
    negatives = [idx for idx in pool if idx not in supports]

    keyphrase = record.get("keyphrase") or extract_subject(steps[0]["question"])
    return TieredExample(
        query=question,
        keyphrase=keyphrase,
        positive_id=paragraph_id(record_id, positive),
        semi_positive_ids=tuple(paragraph_id(record_id, i) for i in semi),
        negative_ids=tuple(paragraph_id(record_id, i) for i in negatives),
    )


def paragraphs_as_documents(record):
    record_id = record.get("id")
    return [
        Document(paragraph_id(record_id, int(p["idx"])), p.get("title", ""), p["paragraph_text"])
        for p in record.get("paragraphs", ())
    ]


def corpus_from_records(records):
    corpus = {}
    for record in records:
        for doc in paragraphs_as_documents(record):
            corpus.setdefault(doc.id, doc)
    return list(corpus.values())


def load_musique(path):
    return read_jsonl(path)


def iter_tiered(path):
    for record in read_jsonl(path):
        yield TieredExample.from_json(record)


def load_corpus(path):
    return [Document.from_json(r) for r in read_jsonl(path)]


# Features and encoder

@lru_cache(maxsize=1 << 16)
def _bucket(token, d_in, hash_seed):
    digest = hashlib.blake2b(f"{hash_seed}:{token}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % d_in


def featurize(text, d_in=DEFAULT_D_IN, hash_seed=0, stopwords=None):
    """Hashed token counts as a 1 x d_in sparse row; stopwords are dropped."""
    stopwords = load_stopwords() if stopwords is None else stopwords
    counts = Counter(
        _bucket(token, d_in, hash_seed)
        for token in _TOKEN.findall(text.lower())
        if token not in stopwords
    )
    if not counts:
        return sparse.csr_matrix((1, d_in))
    cols = np.array(sorted(counts), dtype=np.int64)
    data = np.array([counts[c] for c in cols], dtype=np.float64)
    return sparse.csr_matrix((data, (np.zeros(len(cols), dtype=np.int64), cols)), shape=(1, d_in))


def document_text(doc):
    """Title plus the first DOCUMENT_TOKEN_LIMIT whitespace tokens of the text."""
    body = " ".join(doc.text.split()[:DOCUMENT_TOKEN_LIMIT])
    return f"{doc.title} {body}".strip()


def retrieval_text(query, keyphrase):
    return query if not keyphrase else f"{query} {keyphrase}"


def encode_features(features, params):
    features = features if sparse.issparse(features) else np.asarray(features, dtype=np.float64).reshape(1, -1)
    z = np.asarray(features @ params.projection.T).ravel()
    norm = float(np.linalg.norm(z))
    if norm == 0.0:
        raise DomainError("encoding has zero norm")
    return z / norm


def encode(text, params):
    if params.feature_space != HASHED_TOKEN:
        raise InputError("external feature space: pass feature vectors to encode_features")
    return encode_features(featurize(text, params.d_in, params.hash_seed), params)


# Loss

@dataclass(frozen=True)
class LossTerms:
    total: float
    l1: float
    l2: float


@dataclass(frozen=True)
class LossGradient:
    positive: float
    semi: np.ndarray
    negative: np.ndarray

    def as_vector(self):
        return np.concatenate(([self.positive], self.semi, self.negative))


def _check_sims(sims):
    sims = np.asarray(sims, dtype=np.float64)
    if not np.all(np.isfinite(sims)) or np.any(np.abs(sims) > 1.0 + SIM_TOLERANCE):
        raise InputError("similarities must lie in [-1, 1]")
    return sims


def _loss_and_sim_grad(sims, n_semi, alpha, temperature):
    """Loss and dL/dsim for sims ordered [positive, semi..., negative...]."""
    if not 0.0 <= alpha <= 1.0:
        raise InputError("alpha must lie in [0, 1]")
    scaled = _check_sims(sims) / temperature
    top = 1 + n_semi
    lse_all = logsumexp(scaled)
    lse_top = logsumexp(scaled[:top])
    l2 = max(0.0, float(lse_all - lse_top))
    l1 = max(l2, float(lse_all - scaled[0]))
    if alpha == 1.0:
        total = l1
    elif alpha == 0.0:
        total = l2
    else:
        total = l2 + alpha * (l1 - l2)

    p_all = np.exp(scaled - lse_all)
    p_top = np.exp(scaled[:top] - lse_top)
    g1 = p_all.copy()
    g1[0] -= 1.0
    g2 = p_all.copy()
    g2[:top] -= p_top
    grad = (alpha * g1 + (1.0 - alpha) * g2) / temperature
    return LossTerms(total, l1, l2), grad


def loss_terms(sim_pos, sims_semi, sims_neg, alpha, temperature=1.0):
    sims = np.concatenate(([sim_pos], np.asarray(sims_semi, dtype=np.float64), np.asarray(sims_neg, dtype=np.float64)))
    terms, _ = _loss_and_sim_grad(sims, len(sims_semi), alpha, temperature)
    return terms


def loss(sim_pos, sims_semi, sims_neg, alpha, temperature=1.0):
    """alpha * L1 + (1 - alpha) * L2 with S(Q, D) = exp(sim / temperature)."""
    return loss_terms(sim_pos, sims_semi, sims_neg, alpha, temperature).total


def loss_grad(sim_pos, sims_semi, sims_neg, alpha, temperature=1.0):
    n_semi, n_neg = len(sims_semi), len(sims_neg)
    sims = np.concatenate(([sim_pos], np.asarray(sims_semi, dtype=np.float64), np.asarray(sims_neg, dtype=np.float64)))
    _, grad = _loss_and_sim_grad(sims, n_semi, alpha, temperature)
    return LossGradient(float(grad[0]), grad[1:1 + n_semi], grad[1 + n_semi:1 + n_semi + n_neg])


def example_loss_and_grad(query_x, doc_x, n_semi, projection, alpha, temperature=1.0):
    """
    Loss of one example and its gradient w.r.t. the projection matrix.

    query_x is a 1 x d_in sparse row, doc_x an n x d_in sparse matrix with
    rows ordered [positive, semi..., negative...].
    """
    zq = np.asarray(query_x @ projection.T).ravel()
    nq = float(np.linalg.norm(zq))
    zd = np.asarray(doc_x @ projection.T)
    nd = np.linalg.norm(zd, axis=1)
    if nq == 0.0 or np.any(nd == 0.0):
        raise DomainError("zero-norm encoding inside a training example")
    q = zq / nq
    d = zd / nd[:, None]
    sims = d @ q
    terms, g = _loss_and_sim_grad(sims, n_semi, alpha, temperature)

    dq = d.T @ g
    dzq = (dq - (dq @ q) * q) / nq
    dzd = g[:, None] * (q[None, :] - sims[:, None] * d) / nd[:, None]

    grad = np.asarray(doc_x.T @ dzd).T
    grad[:, query_x.indices] += np.outer(dzq, query_x.data)
    return terms.total, grad


# Training

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    validation_loss: float


@dataclass
class _Prepared:
    query_x: object
    doc_x: object
    n_semi: int
    example: TieredExample = field(repr=False)


def init_params(config, rng=None):
    rng = np.random.default_rng([config.seed, 0]) if rng is None else rng
    projection = rng.normal(0.0, 1.0 / math.sqrt(config.d_out), size=(config.d_out, config.d_in))
    return EncoderParams(projection, config.hash_seed, HASHED_TOKEN, config.temperature)


def prepare_examples(examples, documents, d_in, hash_seed):
    """Featurize queries and document pools once; examples with an empty text are skipped."""
    doc_features = {}
    prepared = []
    for example in examples:
        rows = []
        for doc_id in example.document_ids:
            if doc_id not in doc_features:
                doc_features[doc_id] = featurize(document_text(documents[doc_id]), d_in, hash_seed)
            rows.append(doc_features[doc_id])
        query_x = featurize(retrieval_text(example.query, example.keyphrase), d_in, hash_seed)
        if query_x.nnz == 0 or any(r.nnz == 0 for r in rows):
            logger.warning("skipping example %r: a text has no indexable tokens", example.query)
            continue
        prepared.append(_Prepared(query_x, sparse.vstack(rows, format="csr"), len(example.semi_positive_ids), example))
    return prepared


def _mean_loss(prepared, projection, alpha, temperature):
    if not prepared:
        return float("nan")
    return math.fsum(
        example_loss_and_grad(p.query_x, p.doc_x, p.n_semi, projection, alpha, temperature)[0]
        for p in prepared
    ) / len(prepared)


class Trainer:
    """
    Mini-batch SGD with early stopping on validation loss.

    `config.strategy` picks the objective: "fcl" is the weighted three-tier
    loss, "scl" contrasts the positive against every other document (semi-
    positives included) and "base" returns the untrained projection.
    """

    def __init__(self, config, progress=False):
        self.config = config
        self.alpha = config.loss_alpha
        self.progress = progress
        self.history = []

    def _loss(self, prepared, projection):
        return _mean_loss(prepared, projection, self.alpha, self.config.temperature)

    def fit(self, dataset, corpus, validation=None):
        cfg = self.config
        if not dataset:
            raise InputError("training needs at least one example")
        documents = {doc.id: doc for doc in corpus}
        missing = sorted({i for ex in list(dataset) + list(validation or []) for i in ex.document_ids} - documents.keys())
        if missing:
            raise InputError(f"{len(missing)} referenced documents missing from corpus, e.g. {missing[0]!r}")

        rng = np.random.default_rng(cfg.seed)
        params = init_params(cfg, rng)
        if cfg.strategy == "base":
            logger.info("strategy base: keeping the untrained projection")
            return params
        if validation is None:
            order = rng.permutation(len(dataset))
            n_val = max(1, int(round(len(dataset) * cfg.validation_fraction))) if len(dataset) > 1 else 0
            validation = [dataset[i] for i in order[:n_val]] or list(dataset)
            dataset = [dataset[i] for i in order[n_val:]] or list(dataset)

        train_set = prepare_examples(dataset, documents, cfg.d_in, cfg.hash_seed)
        val_set = prepare_examples(validation, documents, cfg.d_in, cfg.hash_seed)
        if not train_set:
            raise TrainingError("no usable training examples")
        if not val_set:
            val_set = train_set

        projection = params.projection.copy()
        best_projection = projection.copy()
        best_val = self._loss(val_set, projection)
        self.history = [EpochStats(0, self._loss(train_set, projection), best_val)]
        logger.info("epoch 0: train %.6f, validation %.6f", self.history[0].train_loss, best_val)
        stale = 0

        epochs = tqdm(range(1, cfg.max_epochs + 1), desc="train", disable=not self.progress)
        for epoch in epochs:
            order = rng.permutation(len(train_set))
            running = []
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                grad = np.zeros_like(projection)
                for i in batch:
                    p = train_set[i]
                    value, g = example_loss_and_grad(
                        p.query_x, p.doc_x, p.n_semi, projection, self.alpha, cfg.temperature,
                    )
                    running.append(value)
                    grad += g
                projection -= cfg.learning_rate * grad / len(batch)
                if not np.all(np.isfinite(projection)):
                    raise TrainingError("parameters diverged to non-finite values", epoch=epoch)

            train_loss = math.fsum(running) / len(running)
            val_loss = self._loss(val_set, projection)
            if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                raise TrainingError(f"loss diverged (train={train_loss}, validation={val_loss})", epoch=epoch)
            self.history.append(EpochStats(epoch, train_loss, val_loss))
            logger.info("epoch %d: train %.6f, validation %.6f", epoch, train_loss, val_loss)

            if val_loss < best_val:
                best_val, best_projection, stale = val_loss, projection.copy(), 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    logger.info("early stop after epoch %d (best validation %.6f)", epoch, best_val)
                    break

        return EncoderParams(best_projection, cfg.hash_seed, HASHED_TOKEN, cfg.temperature)


def train(dataset, corpus, cfg, validation=None, progress=False):
    return Trainer(cfg, progress=progress).fit(dataset, corpus, validation)


def mean_loss(dataset, corpus, params, alpha):
    """Mean per-example loss of `params` over `dataset`."""
    documents = {doc.id: doc for doc in corpus}
    prepared = prepare_examples(dataset, documents, params.d_in, params.hash_seed)
    return _mean_loss(prepared, params.projection, alpha, params.temperature)


# Index and retrieval

def build_index(corpus, params, features=None):
    """Encode every document; `features` maps doc id -> vector for external feature spaces."""
    if not corpus:
        raise InputError("cannot index an empty corpus")
    rows, ids = [], []
    for doc in corpus:
        try:
            if features is not None:
                rows.append(encode_features(features[doc.id], params))
            else:
                rows.append(encode(document_text(doc), params))
        except DomainError as exc:
            raise DomainError(f"document {doc.id!r}: {exc}") from exc
        ids.append(doc.id)
    return Index(tuple(ids), np.vstack(rows))


def retrieve(query, keyphrase, k, index, params, query_features=None):
    """Top-k documents by cosine, ties broken by doc id; exact brute-force scan."""
    if k < 1:
        raise InputError("k must be >= 1")
    if len(index) == 0:
        raise InputError("index is empty")
    if query_features is not None:
        vector = encode_features(query_features, params)
    else:
        vector = encode(retrieval_text(query, keyphrase), params)
    if index.matrix.shape[1] != vector.shape[0]:
        raise InputError(f"index has dimension {index.matrix.shape[1]} but the encoder produces {vector.shape[0]}")
    scores = np.clip(index.matrix @ vector, -1.0, 1.0)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.doc_ids[i]))
    truncated = k > len(index)
    if truncated:
        logger.warning("k=%d exceeds corpus size %d; returning all documents", k, len(index))
    hits = tuple(RetrievalHit(index.doc_ids[i], float(scores[i])) for i in order[:k])
    return Retrieval(hits, truncated)


# Recall@k

TIERS = ("positive", "semi", "pos-and-semi")


@dataclass(frozen=True)
class RankedRun:
    query_id: str
    ranked_ids: tuple
    positive_id: str
    semi_ids: tuple = ()

    def gold(self, tier):
        if tier == "positive":
            return {self.positive_id}
        if tier == "semi":
            return set(self.semi_ids)
        if tier == "pos-and-semi":
            return {self.positive_id, *self.semi_ids}
        raise InputError(f"unknown tier {tier!r}, expected one of {TIERS}")


def recall_at_k(runs, tier, k):
    """Share of queries with a gold document of `tier` in the top k.

    Queries that have no gold document of the tier (e.g. no semi-positives)
    are left out of the denominator.
    """
    if not runs:
        raise InputError("recall needs at least one run")
    if k < 1:
        raise InputError("k must be >= 1")
    hits = total = 0
    for run in runs:
        gold = run.gold(tier)
        if not gold:
            continue
        total += 1
        hits += bool(gold & set(run.ranked_ids[:k]))
    if total == 0:
        raise InputError(f"no run has gold documents of tier {tier!r}")
    return hits / total


def ranked_runs(examples, corpus, params):
    """Rank each example's own paragraph pool with `params`."""
    documents = {doc.id: doc for doc in corpus}
    runs = []
    for number, example in enumerate(examples):
        pool = [documents[i] for i in example.document_ids]
        retrieval = retrieve(example.query, example.keyphrase, len(pool), build_index(pool, params), params)
        runs.append(RankedRun(str(number), tuple(retrieval.doc_ids), example.positive_id, example.semi_positive_ids))
    return runs


def write_tiered(path, examples):
    return atomic_write_jsonl(Path(path), [ex.to_json() for ex in examples])
