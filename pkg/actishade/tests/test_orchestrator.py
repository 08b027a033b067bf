import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from actishade.backend import LocalBackend
from actishade.errors import InputError, TransportError
from actishade.orchestrator import (
    BARE_QUERY, DEGENERATE_YES_NO, EMPTY_GENERATION, NO_RELEVANT_DOC, Pipeline, PipelineState, PromptSet, Question,
    build_pipeline, generate_next_query, is_single_hop, load_questions, question_from_record, run_pipeline,
    select_relevant, trace_filename, yes_probability,
)
from actishade.retriever import Document, build_index, init_params, load_corpus

from .factories import (
    CASE_ANSWER, CASE_CORPUS, CASE_QUERIES, CASE_QUESTION, CASE_SELECTED, SingleHopAfter, case_study_config,
    case_study_pipeline, case_study_script, local_backend, run_config, toy_model,
)


class CaseStudyTests(SimpleTestCase):
    def test_three_round_walkthrough(self):
        result = case_study_pipeline().run(Question("gloria", CASE_QUESTION))
        self.assertEqual(result.answer, CASE_ANSWER)
        self.assertEqual(result.rounds, 3)
        trace = result.state.trace
        self.assertEqual([r.query for r in trace], list(CASE_QUERIES))
        self.assertEqual([r.keyphrase for r in trace], ["Gloria", "Antonio Vivaldi", "Venice"])
        self.assertEqual([r.selected_doc for r in trace], list(CASE_SELECTED))
        self.assertEqual([r.single_hop_decision for r in trace], [False, True, None])
        self.assertEqual([d.id for d in result.state.accumulated_docs], list(CASE_SELECTED))

    def test_selection_uses_yes_probabilities(self):
        trace = case_study_pipeline().run(CASE_QUESTION).state.trace
        for record in trace:
            chosen = [hit.doc_id for hit in record.retrieved].index(record.selected_doc)
            self.assertAlmostEqual(record.yes_probs[chosen], 0.9)
            self.assertEqual(sorted(record.yes_probs), [0.1, 0.1, 0.9])

    def test_run_pipeline_returns_answer_and_state(self):
        prompts = PromptSet.load("musique")
        corpus = load_corpus(CASE_CORPUS)
        config = case_study_config()
        params = init_params(config.train)
        backend = LocalBackend(toy_model(script=case_study_script(prompts, corpus)))
        answer, state = run_pipeline(CASE_QUESTION, backend, config, params, build_index(corpus, params), corpus)
        self.assertEqual(answer, CASE_ANSWER)
        self.assertEqual(state.round, 3)

    def test_traces_are_deterministic(self):
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            case_study_pipeline(trace_dir=a).run(Question("q1", CASE_QUESTION))
            case_study_pipeline(trace_dir=b).run(Question("q1", CASE_QUESTION))
            first = (Path(a) / "q1.json").read_bytes()
            self.assertEqual(first, (Path(b) / "q1.json").read_bytes())
        trace = json.loads(first)
        self.assertEqual(trace["answer"], CASE_ANSWER)
        self.assertEqual([r["round"] for r in trace["rounds"]], [1, 2, 3])
        self.assertEqual(trace["rounds"][0]["detection"]["selected"], "Gloria")
        self.assertEqual(trace["config_snapshot"]["pipeline"]["top_k"], 3)

    def test_trace_file_names_stay_inside_the_trace_directory(self):
        self.assertEqual(trace_filename("3hop1__gloria"), "3hop1__gloria.json")
        escaping = trace_filename("../../etc/passwd")
        self.assertNotIn("/", escaping)
        self.assertTrue(escaping.startswith("etcpasswd-"))
        self.assertNotEqual(trace_filename("a/b"), trace_filename("ab"))
        self.assertNotEqual(trace_filename(".."), ".json")
        with tempfile.TemporaryDirectory() as tmp:
            traces = Path(tmp) / "traces"
            case_study_pipeline(trace_dir=traces).run(Question("../outside", CASE_QUESTION))
            written = list(traces.iterdir())
            self.assertEqual([p.name for p in written], [trace_filename("../outside")])
            self.assertFalse((Path(tmp) / "outside.json").exists())
            self.assertEqual(json.loads(written[0].read_text(encoding="utf-8"))["question_id"], "../outside")

    def test_parallel_questions(self):
        questions = [Question(f"q{i}", CASE_QUESTION) for i in range(4)]
        results = case_study_pipeline(workers=2).run_many(questions, workers=2)
        self.assertEqual([r.question_id for r in results], ["q0", "q1", "q2", "q3"])
        self.assertEqual({r.answer for r in results}, {CASE_ANSWER})

    def test_top_score_selection(self):
        result = case_study_pipeline(selection="top-score", max_iterations=1).run(CASE_QUESTION)
        record = result.state.trace[0]
        self.assertEqual(record.selected_doc, record.retrieved[0].doc_id)
        self.assertEqual(record.yes_probs, ())


class TerminationTests(SimpleTestCase):
    def test_rounds_follow_the_single_hop_signal(self):
        prompts = PromptSet.load("musique")
        corpus = load_corpus(CASE_CORPUS)
        model = toy_model()
        rng = np.random.default_rng(0)
        for _ in range(200):
            signal, cap = int(rng.integers(1, 9)), int(rng.integers(1, 6))
            config = run_config(pipeline={"detection_method": "none", "max_iterations": cap})
            params = init_params(config.train)
            backend = SingleHopAfter(model, prompts, signal)
            pipeline = Pipeline(backend, config, params, build_index(corpus, params), corpus, prompts=prompts)
            result = pipeline.run("Which river flows past the castle where the treaty was signed?")
            self.assertEqual(result.rounds, min(signal + 1, cap), (signal, cap))
            self.assertIsNone(result.state.trace[-1].next_query)
            self.assertIsNotNone(result.answer)

    def test_partial_trace_is_written_on_failure(self):
        class FailingAnswer(LocalBackend):
            def generate(self, prompt, max_steps=None):
                raise TransportError("backend went away")

        prompts = PromptSet.load("musique")
        corpus = load_corpus(CASE_CORPUS)
        config = run_config(pipeline={"detection_method": "none", "max_iterations": 1})
        params = init_params(config.train)
        with tempfile.TemporaryDirectory() as tmp:
            pipeline = Pipeline(FailingAnswer(toy_model()), config, params, build_index(corpus, params), corpus,
                                prompts=prompts, trace_dir=tmp)
            with self.assertRaises(TransportError):
                pipeline.run(Question("broken", CASE_QUESTION))
            trace = json.loads((Path(tmp) / "broken.json").read_text(encoding="utf-8"))
        self.assertIsNone(trace["answer"])
        self.assertEqual(len(trace["rounds"]), 1)
        self.assertIn("backend went away", trace["error"])

    def test_detection_failure_falls_back_to_bare_query(self):
        prompts = PromptSet.load("musique")
        corpus = load_corpus(CASE_CORPUS)
        config = run_config(pipeline={"detection_method": "coda", "max_iterations": 1})
        params = init_params(config.train)
        pipeline = Pipeline(local_backend(), config, params, build_index(corpus, params), corpus, prompts=prompts)
        record = pipeline.run("which bridge is the oldest of the bridges?").state.trace[0]
        self.assertIsNotNone(record.keyphrase)
        self.assertEqual(record.overshadow_report.method, "CoDA")
        # Removing the only keyphrase leaves nothing to run CoDA on.
        record = pipeline.run("Venice").state.trace[0]
        self.assertIsNone(record.keyphrase)
        self.assertIn(BARE_QUERY, record.flags)

    def test_no_relevant_document_is_traced(self):
        prompts = PromptSet.load("musique")
        corpus = load_corpus(CASE_CORPUS)
        script = {prompts.render_select(CASE_QUESTION, doc): {"next_token": {"Yes": 0.0, "No": 0.9}} for doc in corpus}
        config = run_config(pipeline={"detection_method": "none", "max_iterations": 1})
        params = init_params(config.train)
        with tempfile.TemporaryDirectory() as tmp:
            pipeline = Pipeline(local_backend(script=script), config, params, build_index(corpus, params), corpus,
                                prompts=prompts, trace_dir=tmp)
            record = pipeline.run(Question("nothing", CASE_QUESTION)).state.trace[0]
            trace = json.loads((Path(tmp) / "nothing.json").read_text(encoding="utf-8"))
        self.assertEqual(record.selected_doc, record.retrieved[0].doc_id)
        self.assertEqual(set(record.yes_probs), {0.0})
        self.assertIn(NO_RELEVANT_DOC, trace["rounds"][0]["flags"])

    def test_per_question_paragraphs(self):
        prompts = PromptSet.load("musique")
        config = run_config(pipeline={"detection_method": "none", "max_iterations": 1, "top_k": 2})
        params = init_params(config.train)
        paragraphs = tuple(load_corpus(CASE_CORPUS))
        pipeline = Pipeline(local_backend(), config, params, prompts=prompts)
        record = pipeline.run(Question("p", CASE_QUESTION, paragraphs=paragraphs)).state.trace[0]
        self.assertEqual(len(record.retrieved), 2)
        with self.assertRaises(InputError):
            pipeline.run(Question("none", CASE_QUESTION))

    def test_empty_question(self):
        with self.assertRaises(InputError):
            case_study_pipeline().run("   ")


class JudgementTests(SimpleTestCase):
    def setUp(self):
        self.prompts = PromptSet.load("musique")
        self.docs = [Document(f"d{i}", f"T{i}", f"text number {i}") for i in range(3)]
        self.query = "Which bridge?"

    def backend_with_yes(self, masses):
        script = {
            self.prompts.render_select(self.query, doc): {"next_token": {"Yes": yes, "No": 1.0 - yes}}
            for doc, yes in zip(self.docs, masses)
        }
        return local_backend(script=script)

    def test_highest_yes_probability_wins(self):
        doc, probs = select_relevant(self.query, self.docs, self.backend_with_yes([0.9, 0.2, 0.4]), self.prompts)
        self.assertEqual(doc.id, "d0")
        np.testing.assert_allclose(probs, [0.9, 0.2, 0.4])

    def test_ties_use_retrieval_score_then_rank(self):
        backend = self.backend_with_yes([0.5, 0.5, 0.5])
        doc, _ = select_relevant(self.query, self.docs, backend, self.prompts, scores=[0.1, 0.3, 0.3])
        self.assertEqual(doc.id, "d1")
        doc, _ = select_relevant(self.query, self.docs, backend, self.prompts)
        self.assertEqual(doc.id, "d0")

    def test_single_document(self):
        doc, probs = select_relevant(self.query, self.docs[:1], self.backend_with_yes([0.1]), self.prompts)
        self.assertEqual(doc.id, "d0")
        self.assertEqual(len(probs), 1)

    def test_no_documents(self):
        with self.assertRaises(InputError):
            select_relevant(self.query, [], local_backend(), self.prompts)

    def test_degenerate_distribution_is_flagged(self):
        script = {self.prompts.render_select(self.query, doc): {"next_token": {"tok7": 1.0}} for doc in self.docs}
        flags = []
        _, probs = select_relevant(self.query, self.docs, local_backend(script=script), self.prompts, flags=flags)
        self.assertEqual(probs, [0.0, 0.0, 0.0])
        self.assertEqual(len([f for f in flags if f.startswith(DEGENERATE_YES_NO)]), 3)
        self.assertEqual(flags[-1], NO_RELEVANT_DOC)

    def test_no_yes_mass_keeps_the_first_ranked_document(self):
        script = {
            self.prompts.render_select(self.query, doc): {"next_token": {"Yes": 0.0, "No": 0.9}}
            for doc in self.docs
        }
        flags = []
        doc, probs = select_relevant(self.query, self.docs, local_backend(script=script), self.prompts,
                                     scores=[0.2, 0.9, 0.5], flags=flags)
        self.assertEqual(doc.id, "d0")
        self.assertEqual(probs, [0.0, 0.0, 0.0])
        self.assertEqual(flags, [NO_RELEVANT_DOC])

    def test_yes_probability(self):
        probs = np.array([0.0, 0.3, 0.1, 0.6])
        self.assertAlmostEqual(yes_probability(probs, [1], [2]), 0.75)
        self.assertIsNone(yes_probability(probs, [0], [0]))

    def test_single_hop_threshold(self):
        query = "What is the name of the famous bridge in Venice?"
        backend = local_backend(script={
            self.prompts.render_single_hop(query): {"next_token": {"Yes": 0.5, "No": 0.5}},
        })
        self.assertTrue(is_single_hop(query, backend, self.prompts))
        self.assertFalse(is_single_hop(query, backend, self.prompts, threshold=0.6))

    def test_degenerate_single_hop_is_false(self):
        query = "Where is it?"
        backend = local_backend(script={self.prompts.render_single_hop(query): {"next_token": {"tok9": 1.0}}})
        flags = []
        self.assertFalse(is_single_hop(query, backend, self.prompts, threshold=0.0, flags=flags))
        self.assertEqual(len(flags), 1)

    def test_empty_rewrite_keeps_the_query(self):
        backend = local_backend(script={self.prompts.render_next_query(self.query, self.docs[0]): {"text": "  "}})
        flags = []
        self.assertEqual(generate_next_query(self.query, self.docs[0], backend, self.prompts, flags), self.query)
        self.assertEqual(flags, [EMPTY_GENERATION])

    def test_rewrite_keeps_first_line(self):
        prompt = self.prompts.render_next_query(self.query, self.docs[0])
        backend = local_backend(script={prompt: {"text": "Where is Venice?\nExplanation follows."}})
        self.assertEqual(generate_next_query(self.query, self.docs[0], backend, self.prompts), "Where is Venice?")


class PromptTests(SimpleTestCase):
    def test_every_bundled_set_loads(self):
        for name in ("musique", "hotpotqa", "2wikimqa"):
            prompts = PromptSet.load(name)
            self.assertIn("{question}", prompts.select)
            self.assertIn("{documents}", prompts.answer)

    def test_document_braces_survive_rendering(self):
        prompts = PromptSet.load("musique")
        rendered = prompts.render_select("q", Document("d", "", "set {x} of {question}"))
        self.assertIn("set {x} of {question}", rendered)

    def test_answer_lists_documents(self):
        prompts = PromptSet.load("musique")
        docs = [Document("a", "A", "first"), Document("b", "B", "second")]
        rendered = prompts.render_answer("q", docs)
        self.assertIn("[1] A: first", rendered)
        self.assertIn("[2] B: second", rendered)

    def test_missing_set(self):
        with tempfile.TemporaryDirectory() as tmp, self.assertRaises(InputError):
            PromptSet.load("musique", tmp)


class QuestionLoadingTests(SimpleTestCase):
    def test_musique_record(self):
        record = {"id": "m1", "question": "q", "answer": "Rialto Bridge", "answer_aliases": ["Ponte di Rialto"],
                  "paragraphs": [{"idx": 0, "title": "T", "paragraph_text": "text"}]}
        question = question_from_record(record)
        self.assertEqual(question.gold, ("Rialto Bridge", "Ponte di Rialto"))
        self.assertEqual([d.id for d in question.paragraphs], ["m1:0"])

    def test_hotpot_record(self):
        record = {"_id": "h1", "question": "q", "answer": "yes",
                  "context": [["Venice", ["Venice is a city.", "It has canals."]]]}
        question = question_from_record(record)
        self.assertEqual(question.question_id, "h1")
        self.assertEqual(question.paragraphs[0].text, "Venice is a city. It has canals.")

    def test_duplicate_ids(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "questions.jsonl"
            path.write_text('{"id": "a", "question": "x"}\n{"id": "a", "question": "y"}\n', encoding="utf-8")
            with self.assertRaises(InputError):
                load_questions(path)

    def test_state_accumulates_each_document_once(self):
        state = PipelineState("q")
        doc = Document("d", "", "text")
        state.accumulate(doc)
        state.accumulate(doc)
        self.assertEqual(len(state.accumulated_docs), 1)

    def test_index_needs_its_corpus(self):
        config = run_config(paths={"index": "/nonexistent/index.npz"})
        with self.assertRaises(InputError):
            build_pipeline(config, local_backend())
