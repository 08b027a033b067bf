import json
import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from actishade.backend import TokenizedText
from actishade.errors import AlignmentError, InputError, NoCandidates
from actishade.keyphrase import (
    ExternalAnnotator, HeuristicAnnotator, Keyphrase, align_span, extract_candidates, locate_phrases,
    resolve_overlaps,
)

from .factories import CASE_QUESTION, local_backend


class HeuristicExtractionTests(SimpleTestCase):
    def setUp(self):
        self.backend = local_backend()
        self.annotator = HeuristicAnnotator()

    def extract(self, query):
        return extract_candidates(query, self.backend.tokenize(query), self.annotator)

    def test_case_study_query(self):
        candidates = self.extract(CASE_QUESTION)
        texts = [c.text for c in candidates]
        for expected in ("Gloria in D Major", "bridge", "birthplace", "composer"):
            self.assertIn(expected, texts)
        gloria = candidates[texts.index("Gloria in D Major")]
        self.assertEqual(gloria.token_span, (12, 16))
        self.assertEqual(gloria.label, "PROPN")

    def test_entities_and_numbers(self):
        texts = {c.text for c in self.extract("Who founded Acme Corp in 1990?")}
        self.assertEqual(texts, {"founded", "Acme Corp", "1990"})

    def test_stopwords_only(self):
        with self.assertRaises(NoCandidates):
            self.extract("the of a")

    def test_candidates_do_not_overlap(self):
        candidates = self.extract(CASE_QUESTION)
        spans = sorted(c.token_span for c in candidates)
        for (_, end), (start, _) in zip(spans, spans[1:]):
            self.assertLessEqual(end, start)

    def test_mask_matches_token_span(self):
        candidates = self.extract(CASE_QUESTION)
        length = len(candidates.tokenized)
        for candidate in candidates:
            mask = candidate.mask(length)
            start, end = candidate.token_span
            self.assertEqual(mask.sum(), end - start)
            self.assertEqual(mask[start:end].min(), 1.0)

    def test_empty_query(self):
        with self.assertRaises(InputError):
            extract_candidates("  ", None, self.annotator)


class AlignmentTests(SimpleTestCase):
    def setUp(self):
        self.tokenized = TokenizedText("a bb ccc", (4, 5, 6), ((0, 1), (2, 4), (5, 8)))

    def test_minimal_covering_range(self):
        self.assertEqual(align_span((3, 6), self.tokenized), (1, 3))
        self.assertEqual(align_span((0, 1), self.tokenized), (0, 1))

    def test_whitespace_only_span(self):
        with self.assertRaises(AlignmentError):
            align_span((1, 2), self.tokenized)

    def test_span_outside_text(self):
        with self.assertRaises(InputError):
            align_span((6, 12), self.tokenized)

    def test_mask_outside_length(self):
        with self.assertRaises(InputError):
            Keyphrase("x", (0, 1), (2, 4)).mask(3)


class OverlapTests(SimpleTestCase):
    def test_longest_span_wins(self):
        spans = [(0, 5, "A"), (3, 10, "B"), (12, 14, "C")]
        self.assertEqual(resolve_overlaps(spans), [(3, 10, "B"), (12, 14, "C")])

    def test_equal_length_prefers_earlier(self):
        self.assertEqual(resolve_overlaps([(2, 6, "B"), (0, 4, "A")]), [(0, 4, "A")])

    def test_locate_repeated_phrase(self):
        spans = locate_phrases("bridge in bridge", ["bridge", "bridge"])
        self.assertEqual([s[:2] for s in spans], [(0, 6), (10, 16)])

    def test_locate_missing_phrase(self):
        with self.assertRaises(InputError):
            locate_phrases("bridge", ["canal"])


class ExternalAnnotatorTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / "annotations.jsonl"
        record = {"query_id": "q1", "spans": [
            {"start": 0, "end": 3, "label": "DET"},
            {"start": 4, "end": 10, "label": "NOUN"},
            {"start": 14, "end": 20, "label": "GPE"},
        ]}
        self.path.write_text(json.dumps(record) + "\n", encoding="utf-8")

    def test_function_word_tags_are_dropped(self):
        annotator = ExternalAnnotator(self.path)
        self.assertEqual(annotator.spans("The bridge in Venice", "q1"), [(4, 10, "NOUN"), (14, 20, "GPE")])

    def test_unknown_query_uses_fallback(self):
        annotator = ExternalAnnotator(self.path, fallback=HeuristicAnnotator())
        spans = annotator.spans("famous bridge", "q2")
        self.assertEqual([s[:2] for s in spans], [(0, 6), (7, 13)])

    def test_unknown_query_without_fallback(self):
        with self.assertRaises(InputError):
            ExternalAnnotator(self.path).spans("famous bridge", "q2")

    def test_malformed_record(self):
        self.path.write_text(json.dumps({"query_id": "q1"}) + "\n", encoding="utf-8")
        with self.assertRaises(InputError):
            ExternalAnnotator(self.path)
