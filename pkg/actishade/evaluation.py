"""Answer metrics (Cover-EM, token F1), reports and the sigma sweep."""
import csv
import io
import logging
import math
import re
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .errors import ActiShadeError, InputError, MalformedRecord
from .utils import atomic_write_json, atomic_write_text, read_jsonl

logger = logging.getLogger(__name__)

REPORT_CSV_HEADER = ("question_id", "cover_em", "f1")
SWEEP_CSV_HEADER = ("sigma", "acc", "f1", "mean_similarity")

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCTUATION = str.maketrans("", "", string.punctuation)


def normalize_answer(text):
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    text = text.lower().translate(_PUNCTUATION)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def _gold_tokens(gold):
    tokens = normalize_answer(gold).split()
    if not tokens:
        raise InputError(f"gold answer {gold!r} is empty after normalization")
    return tokens


def cover_em(prediction, gold):
    """1 if the normalized gold occurs in the normalized prediction on token boundaries."""
    gold_tokens = _gold_tokens(gold)
    pred_tokens = normalize_answer(prediction).split()
    width = len(gold_tokens)
    for start in range(len(pred_tokens) - width + 1):
        if pred_tokens[start:start + width] == gold_tokens:
            return 1
    return 0


def token_f1(prediction, gold):
    gold_tokens = _gold_tokens(gold)
    pred_tokens = normalize_answer(prediction).split()
    if not pred_tokens:
        return 0.0
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def max_over_golds(metric, prediction, golds):
    if isinstance(golds, str):
        golds = [golds]
    if not golds:
        raise InputError("at least one gold answer is required")
    return max(metric(prediction, gold) for gold in golds)


@dataclass(frozen=True)
class EvalRecord:
    question_id: str
    prediction: str
    gold: tuple

    @classmethod
    def from_json(cls, record):
        try:
            gold = record["gold"]
            return cls(str(record["question_id"]), record["prediction"], (gold,) if isinstance(gold, str) else tuple(gold))
        except KeyError as exc:
            raise MalformedRecord(f"prediction record missing {exc}") from exc


@dataclass(frozen=True)
class QuestionScore:
    question_id: str
    cover_em: int
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    n: int
    acc: float
    f1: float
    per_question: tuple

    def to_json(self):
        return {
            "n": self.n,
            "acc": self.acc,
            "f1": self.f1,
            "per_question": [
                {"question_id": q.question_id, "cover_em": q.cover_em, "f1": q.f1} for q in self.per_question
            ],
        }

    def to_csv(self):
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(REPORT_CSV_HEADER)
        for q in self.per_question:
            writer.writerow((q.question_id, q.cover_em, repr(q.f1)))
        return buffer.getvalue()

    def save(self, json_path, csv_path):
        atomic_write_json(json_path, self.to_json())
        atomic_write_text(csv_path, self.to_csv())


def _score(record):
    return QuestionScore(
        record.question_id,
        max_over_golds(cover_em, record.prediction, record.gold),
        max_over_golds(token_f1, record.prediction, record.gold),
    )


def evaluate(records, workers=1):
    """Per-question Cover-EM and F1 plus their means, reported as percentages."""
    records = list(records)
    if not records:
        raise InputError("evaluate needs at least one record")
    seen = set()
    for record in records:
        if record.question_id in seen:
            raise InputError(f"duplicate question id {record.question_id!r}")
        seen.add(record.question_id)
    if workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(records))) as executor:
            scores = list(executor.map(_score, records))
    else:
        scores = [_score(record) for record in records]
    n = len(scores)
    acc = 100.0 * math.fsum(s.cover_em for s in scores) / n
    f1 = 100.0 * math.fsum(s.f1 for s in scores) / n
    return MetricsReport(n, acc, f1, tuple(scores))


def load_predictions(path):
    return [EvalRecord.from_json(r) for r in read_jsonl(path)]


# Sigma sweep

@dataclass(frozen=True)
class SweepRow:
    sigma: float
    acc: float
    f1: float
    mean_similarity: float


def mean_similarity(results):
    """Mean of every defined keyphrase similarity across all detection rounds."""
    values = [
        value
        for result in results
        for record in result.state.trace
        if record.overshadow_report is not None
        for value in record.overshadow_report.similarities()
        if value is not None
    ]
    return math.fsum(values) / len(values) if values else float("nan")


def sweep_sigma(questions, sigmas, config, pipeline_factory, progress=None):
    """
    Run the pipeline once per sigma and tabulate (sigma, acc, f1, mean_similarity).

    `pipeline_factory(config)` builds a Pipeline for a config copy carrying
    the sigma. A sigma whose run fails yields a NaN row and is logged.
    """
    sigmas = [float(s) for s in sigmas]
    if not sigmas:
        raise InputError("sigma sweep needs at least one sigma")
    if any(s < 0 for s in sigmas):
        raise InputError("sigmas must be nonnegative")
    if not questions:
        raise InputError("sigma sweep needs at least one question")

    rows = []
    for sigma in sigmas:
        swept = config.model_copy(deep=True)
        swept.detection.sigma = sigma
        try:
            results = pipeline_factory(swept).run_many(questions)
            report = evaluate(
                EvalRecord(r.question_id, r.answer, q.gold) for r, q in zip(results, questions)
            )
        except ActiShadeError as exc:
            logger.error("sigma=%s failed: %s", sigma, exc)
            rows.append(SweepRow(sigma, float("nan"), float("nan"), float("nan")))
        else:
            rows.append(SweepRow(sigma, report.acc, report.f1, mean_similarity(results)))
            logger.info("sigma=%s acc=%.2f f1=%.2f", sigma, report.acc, report.f1)
        if progress is not None:
            progress.update(1)
    return rows


def sweep_csv(rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SWEEP_CSV_HEADER)
    for row in rows:
        writer.writerow((repr(row.sigma), repr(row.acc), repr(row.f1), repr(row.mean_similarity)))
    return buffer.getvalue()
