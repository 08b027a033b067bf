"""
Candidate keyphrase extraction and token alignment.

An Annotator proposes labelled character spans over a query; the
extraction step filters them, resolves overlaps and aligns each one to the
backend's token sequence so GaP can build a perturbation mask from it.
"""
import logging
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, InputError, NoCandidates
from .utils import load_stopwords, read_jsonl

logger = logging.getLogger(__name__)

# Universal POS tags an external tagger may emit. Spans tagged with one of
# these are kept only when the tag is in CONTENT_POS; any other label is
# treated as a named-entity type and kept.
UNIVERSAL_POS = frozenset({
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
    "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X", "SPACE",
})
CONTENT_POS = frozenset({"NOUN", "ADJ", "VERB", "PROPN", "NUM", "ADV"})

_WORD = re.compile(r"[^\W_]+(?:[-.][^\W_]+)*")


@dataclass(frozen=True)
class Keyphrase:
    text: str
    char_span: tuple
    token_span: tuple
    label: str = ""

    def mask(self, length):
        """Binary mask over `length` tokens, 1 inside token_span."""
        start, end = self.token_span
        if not 0 <= start < end <= length:
            raise InputError(f"token span {self.token_span} outside [0, {length})")
        mask = np.zeros(length)
        mask[start:end] = 1.0
        return mask


@dataclass(frozen=True)
class CandidateSet:
    query: str
    tokenized: object
    candidates: tuple

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, index):
        return self.candidates[index]


class Annotator(ABC):
    @abstractmethod
    def spans(self, query, query_id=None):
        """Return (start, end, label) character spans proposed for `query`."""


def _is_number(word):
    return word.replace(".", "").replace("-", "").isdigit()


class HeuristicAnnotator(Annotator):
    """
    Rule-based stand-in for a POS tagger and NER model.

    Stopwords are dropped, lowercase content words become single-token
    candidates, and runs of capitalized words and numerals are merged into
    one entity candidate. A lowercase connector ("of", "in", ...) stays inside
    an entity only when it sits between two capitalized words, which turns
    "Gloria in D Major" into one span but leaves "Acme Corp in 1990" as two.
    """

    CONNECTORS = frozenset({"of", "in", "de", "la", "le", "du", "da", "del", "der", "di", "von", "van"})

    def __init__(self, stopwords=None):
        self.stopwords = load_stopwords() if stopwords is None else frozenset(w.lower() for w in stopwords)

    def _is_capitalized(self, word):
        return word[:1].isupper() and word.lower() not in self.stopwords

    def spans(self, query, query_id=None):
        words = [(m.start(), m.end(), m.group()) for m in _WORD.finditer(query)]
        spans = []
        run = None  # [start, end, all_numeric]

        def close():
            nonlocal run
            if run is not None:
                spans.append((run[0], run[1], "NUM" if run[2] else "PROPN"))
                run = None

        for i, (start, end, word) in enumerate(words):
            lowered = word.lower()
            numeric = _is_number(word)
            if numeric or self._is_capitalized(word):
                if run is None:
                    run = [start, end, numeric]
                else:
                    run[1] = end
                    run[2] = run[2] and numeric
                continue
            if lowered in self.stopwords:
                following = words[i + 1][2] if i + 1 < len(words) else ""
                bridges = (
                    run is not None
                    and lowered in self.CONNECTORS
                    and not run[2]
                    and self._is_capitalized(following)
                    and not _is_number(following)
                )
                if not bridges:
                    close()
                continue
            close()
            spans.append((start, end, "CONTENT"))
        close()
        return spans


class ExternalAnnotator(Annotator):
    """
    Spans precomputed offline by any POS/NER tool, one JSONL record per query.
    Queries without a record (e.g. reformulated ones) go to `fallback`.
    """

    def __init__(self, path, fallback=None):
        self.path = path
        self.fallback = fallback
        self._records = {}
        for record in read_jsonl(path):
            try:
                query_id = str(record["query_id"])
                spans = [(int(s["start"]), int(s["end"]), str(s.get("label", ""))) for s in record["spans"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}: malformed annotation record {record!r}") from exc
            self._records[query_id] = spans
        logger.info("loaded annotations for %d queries from %s", len(self._records), path)

    @property
    def stopwords(self):
        return getattr(self.fallback, "stopwords", None)

    def spans(self, query, query_id=None):
        if query_id is None or str(query_id) not in self._records:
            if self.fallback is not None:
                return self.fallback.spans(query, query_id)
            raise InputError(f"no external annotation for query_id {query_id!r}")
        kept = []
        for start, end, label in self._records[str(query_id)]:
            tag = label.upper()
            if tag in UNIVERSAL_POS and tag not in CONTENT_POS:
                continue
            kept.append((start, end, label))
        return kept


def annotator_for(paths):
    if paths.annotations is not None:
        return ExternalAnnotator(paths.annotations, fallback=HeuristicAnnotator())
    return HeuristicAnnotator()


def align_span(char_span, tokenized):
    """Minimal contiguous token range whose offsets overlap `char_span`."""
    start, end = char_span
    if not 0 <= start < end <= len(tokenized.text):
        raise InputError(f"char span {char_span} outside text of length {len(tokenized.text)}")
    hits = [i for i, (ts, te) in enumerate(tokenized.offsets) if ts < end and te > start]
    if not hits:
        raise AlignmentError(f"char span {char_span} overlaps no token")
    return (hits[0], hits[-1] + 1)


def resolve_overlaps(spans):
    """Longest span first, ties by earlier start; survivors in document order."""
    chosen = []
    for span in sorted(spans, key=lambda s: (-(s[1] - s[0]), s[0])):
        if all(span[1] <= other[0] or span[0] >= other[1] for other in chosen):
            chosen.append(span)
    return sorted(chosen, key=lambda s: s[0])


def build_candidates(query, tokenized, spans, stopwords=None):
    """Filter, de-overlap and align raw spans into a CandidateSet."""
    stopwords = load_stopwords() if stopwords is None else stopwords
    usable = []
    for start, end, label in spans:
        if not 0 <= start < end <= len(query):
            logger.warning("dropping span [%d, %d) outside query", start, end)
            continue
        words = [w.lower() for w in _WORD.findall(query[start:end])]
        if not words or all(w in stopwords for w in words):
            continue
        usable.append((start, end, label))

    candidates = []
    for start, end, label in resolve_overlaps(usable):
        try:
            token_span = align_span((start, end), tokenized)
        except AlignmentError:
            logger.warning("span %r aligns to no token, skipped", query[start:end])
            continue
        candidates.append(Keyphrase(query[start:end], (start, end), token_span, label))

    if not candidates:
        raise NoCandidates(f"no keyphrase candidates in query {query!r}")
    return CandidateSet(query, tokenized, tuple(candidates))


def extract_candidates(query, tokenized, annotator, query_id=None):
    if not isinstance(query, str) or not query.strip():
        raise InputError("query must be non-empty")
    stopwords = getattr(annotator, "stopwords", None)
    return build_candidates(query, tokenized, annotator.spans(query, query_id), stopwords)


def locate_phrases(query, phrases):
    """Character spans of `phrases` in `query`, first non-overlapping occurrence each."""
    spans = []
    lowered = query.lower()
    for phrase in phrases:
        needle = phrase.lower()
        position = 0
        while True:
            found = lowered.find(needle, position)
            if found < 0:
                raise InputError(f"phrase {phrase!r} does not occur in query {query!r}")
            span = (found, found + len(needle))
            if all(span[1] <= s[0] or span[0] >= s[1] for s in spans):
                spans.append((span[0], span[1], "SCRIPTED"))
                break
            position = found + 1
    return spans
