"""
The iterative retrieval loop.

Each round detects the overshadowed keyphrase of the current query, retrieves
with it, asks the model which retrieved document is relevant and rewrites the
query around that document. Once a rewritten query is judged single-hop one
more round runs and the loop stops; the answer is generated over every
document selected along the way.
"""
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from django.conf import settings
from django.utils.text import slugify

from .errors import DetectionError, InputError, MalformedRecord, NoCandidates
from .gap import detector_for
from .keyphrase import annotator_for, extract_candidates
from .retriever import (
    Document, build_index, init_params, load_corpus, load_index, load_params, paragraphs_as_documents, retrieve,
)
from .utils import atomic_write_json, read_jsonl

logger = logging.getLogger(__name__)

PROMPT_NAMES = ("select", "next_query", "single_hop", "answer")
BUNDLED_PROMPTS = Path(__file__).resolve().parent / "prompts"

# Trace flags
DEGENERATE_YES_NO = "degenerate-yes-no"
EMPTY_GENERATION = "empty-generation"
BARE_QUERY = "bare-query"
TRUNCATED_RETRIEVAL = "truncated-retrieval"
NO_RELEVANT_DOC = "no-relevant-doc"


# Prompts

def format_document(doc):
    return f"{doc.title}: {doc.text}" if doc.title else doc.text


@dataclass(frozen=True)
class PromptSet:
    name: str
    select: str
    next_query: str
    single_hop: str
    answer: str

    @classmethod
    def load(cls, name, root=None):
        """Read {root}/{name}/{select,next_query,single_hop,answer}.txt."""
        if root is None:
            root = settings.ACTISHADE.get("PROMPTS_DIR", BUNDLED_PROMPTS) if settings.configured else BUNDLED_PROMPTS
        folder = Path(root) / name
        templates = {}
        for prompt in PROMPT_NAMES:
            path = folder / f"{prompt}.txt"
            if not path.exists():
                raise InputError(f"prompt template missing: {path}")
            templates[prompt] = path.read_text(encoding="utf-8").rstrip()
        return cls(name=name, **templates)

    @staticmethod
    def render(template, **values):
        # Plain replacement; documents may contain braces.
        for key, value in values.items():
            template = template.replace("{" + key + "}", value)
        return template

    def render_select(self, query, doc):
        return self.render(self.select, question=query, document=format_document(doc))

    def render_next_query(self, query, doc):
        return self.render(self.next_query, question=query, document=format_document(doc))

    def render_single_hop(self, query):
        return self.render(self.single_hop, question=query)

    def render_answer(self, question, docs):
        listing = "\n".join(f"[{n}] {format_document(doc)}" for n, doc in enumerate(docs, start=1))
        return self.render(self.answer, question=question, documents=listing)


# Yes/No judgements

def yes_no_ids(vocabulary):
    yes = [i for i, surface in enumerate(vocabulary) if surface.lower().startswith("yes")]
    no = [i for i, surface in enumerate(vocabulary) if surface.lower().startswith("no")]
    return yes, no


def yes_probability(probs, yes_ids, no_ids):
    """P(Yes) / (P(Yes) + P(No)); None when both masses are zero."""
    yes = math.fsum(float(probs[i]) for i in yes_ids)
    no = math.fsum(float(probs[i]) for i in no_ids)
    if yes + no <= 0.0:
        return None
    return yes / (yes + no)


def _judge(prompt, backend, flags, subject):
    yes_ids, no_ids = yes_no_ids(backend.vocabulary)
    score = yes_probability(backend.next_token_distribution(prompt), yes_ids, no_ids)
    if score is None:
        logger.warning("no Yes/No mass for %s", subject)
        flags.append(f"{DEGENERATE_YES_NO}:{subject}")
        return 0.0
    return score


def select_relevant(query, docs, backend, prompts, scores=None, flags=None):
    """
    Pick the document with the highest normalized Yes-probability.

    `docs` are in retrieval rank order; ties go to the higher retrieval score
    in `scores`, then to the earlier rank. When no document gets any Yes
    mass the first-ranked one is taken and flagged. Returns
    (document, yes_probs).
    """
    if not docs:
        raise InputError("select_relevant needs at least one document")
    flags = [] if flags is None else flags
    scores = [0.0] * len(docs) if scores is None else list(scores)
    yes_probs = [_judge(prompts.render_select(query, doc), backend, flags, f"doc {doc.id}") for doc in docs]
    if max(yes_probs) == 0.0:
        logger.warning("no retrieved document judged relevant to %r; keeping the first-ranked", query)
        flags.append(NO_RELEVANT_DOC)
        return docs[0], yes_probs
    best = max(range(len(docs)), key=lambda i: (yes_probs[i], scores[i], -i))
    return docs[best], yes_probs


def generate_next_query(query, doc, backend, prompts, flags=None):
    flags = [] if flags is None else flags
    generated = backend.generate(prompts.render_next_query(query, doc))
    lines = [line.strip() for line in generated.strip().splitlines()]
    if not lines or not lines[0]:
        logger.warning("empty query rewrite for %r; keeping the query", query)
        flags.append(EMPTY_GENERATION)
        return query
    return lines[0]


def is_single_hop(query, backend, prompts, threshold=0.5, flags=None):
    if not query or not query.strip():
        raise InputError("query must be non-empty")
    flags = [] if flags is None else flags
    before = len(flags)
    score = _judge(prompts.render_single_hop(query), backend, flags, "single-hop")
    if len(flags) > before:
        return False
    return score >= threshold


# Trace

@dataclass
class RoundRecord:
    query: str
    keyphrase: object = None
    overshadow_report: object = None
    retrieved: tuple = ()
    yes_probs: tuple = ()
    selected_doc: str = None
    next_query: str = None
    single_hop_decision: bool = None
    flags: list = field(default_factory=list)

    def to_json(self, round_number):
        return {
            "round": round_number,
            "query": self.query,
            "keyphrase": self.keyphrase,
            "detection": self.overshadow_report.to_json() if self.overshadow_report is not None else None,
            "retrieved": [{"doc_id": hit.doc_id, "score": hit.score} for hit in self.retrieved],
            "yes_probs": list(self.yes_probs),
            "selected_doc": self.selected_doc,
            "next_query": self.next_query,
            "single_hop_decision": self.single_hop_decision,
            "flags": list(self.flags),
        }


@dataclass
class PipelineState:
    current_query: str
    round: int = 0
    accumulated_docs: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def accumulate(self, doc):
        if all(existing.id != doc.id for existing in self.accumulated_docs):
            self.accumulated_docs.append(doc)

    def trace_json(self, question_id, answer, config_snapshot, error=None):
        payload = {
            "question_id": question_id,
            "rounds": [record.to_json(n) for n, record in enumerate(self.trace, start=1)],
            "answer": answer,
            "config_snapshot": config_snapshot,
        }
        if error is not None:
            payload["error"] = error
        return payload


def trace_filename(question_id):
    """`<id>.json` for ids that are already safe file names, `<slug>-<hash>.json` otherwise."""
    question_id = str(question_id)
    slug = slugify(question_id)
    if slug and slug == question_id:
        return f"{slug}.json"
    digest = hashlib.blake2b(question_id.encode("utf-8"), digest_size=4).hexdigest()
    return f"{slug}-{digest}.json" if slug else f"{digest}.json"


@dataclass(frozen=True)
class Question:
    question_id: str
    question: str
    gold: tuple = ()
    paragraphs: tuple = ()


def question_from_record(record, position=0):
    """Normalize MuSiQue, HotpotQA and 2WikiMultihopQA style records."""
    try:
        text = record["question"]
    except KeyError as exc:
        raise MalformedRecord(f"question record {position} has no 'question'") from exc
    question_id = str(record.get("id", record.get("_id", record.get("question_id", position))))

    gold = record.get("gold", record.get("answer", record.get("golden_answers", ())))
    gold = [gold] if isinstance(gold, str) else list(gold)
    gold += [alias for alias in record.get("answer_aliases", ()) if alias not in gold]

    if "paragraphs" in record:
        paragraphs = paragraphs_as_documents(record)
    elif "context" in record:
        # HotpotQA / 2Wiki: [[title, [sentence, ...]], ...]
        paragraphs = [
            Document(f"{question_id}:{n}", title, " ".join(sentences))
            for n, (title, sentences) in enumerate(record["context"])
        ]
    else:
        paragraphs = []
    return Question(question_id, text, tuple(gold), tuple(paragraphs))


def load_questions(path):
    questions = [question_from_record(r, n) for n, r in enumerate(read_jsonl(path))]
    seen = set()
    for q in questions:
        if q.question_id in seen:
            raise InputError(f"duplicate question id {q.question_id!r} in {path}")
        seen.add(q.question_id)
    return questions


@dataclass
class PipelineResult:
    question_id: str
    answer: str
    state: PipelineState

    @property
    def rounds(self):
        return len(self.state.trace)


class Pipeline:
    """One configured ActiShade loop. Safe to share across threads."""

    def __init__(self, backend, config, params, index=None, corpus=(), prompts=None, annotator=None,
                 detector=None, trace_dir=None):
        self.backend = backend
        self.config = config
        self.params = params
        self.index = index
        self.documents = {doc.id: doc for doc in corpus}
        self.prompts = prompts or PromptSet.load(config.pipeline.prompt_set, config.paths.prompts)
        self.annotator = annotator or annotator_for(config.paths)
        if detector is None and config.pipeline.detection_method != "none":
            detector = detector_for(config.pipeline.detection_method, config.detection)
        self.detector = detector
        self.trace_dir = Path(trace_dir) if trace_dir is not None else None

    # One round

    def _detect(self, query, query_id, record):
        if self.detector is None:
            return None
        try:
            tokenized = self.backend.tokenize(query)
            candidates = extract_candidates(query, tokenized, self.annotator, query_id)
            report = self.detector.detect(query, candidates, self.backend)
        except (NoCandidates, DetectionError) as exc:
            logger.warning("retrieving on the bare query %r: %s", query, exc)
            record.flags.append(BARE_QUERY)
            return None
        record.overshadow_report = report
        return report.selected.text

    def _round(self, state, question_id, index, documents):
        cfg = self.config.pipeline
        query = state.current_query
        record = RoundRecord(query=query)
        state.trace.append(record)

        record.keyphrase = self._detect(query, question_id if state.round == 0 else None, record)
        retrieval = retrieve(query, record.keyphrase, cfg.top_k, index, self.params)
        if retrieval.truncated:
            record.flags.append(TRUNCATED_RETRIEVAL)
        record.retrieved = retrieval.hits
        docs = [documents[hit.doc_id] for hit in retrieval.hits]

        if cfg.selection == "top-score":
            selected = docs[0]
        else:
            selected, yes_probs = select_relevant(
                query, docs, self.backend, self.prompts, [hit.score for hit in retrieval.hits], record.flags,
            )
            record.yes_probs = tuple(yes_probs)
        record.selected_doc = selected.id
        state.accumulate(selected)
        state.round += 1
        return record, selected

    # Loop

    def _pool(self, question):
        if question.paragraphs:
            documents = {doc.id: doc for doc in question.paragraphs}
            return build_index(question.paragraphs, self.params), documents
        if self.index is None:
            raise InputError("no retrieval index configured and the question has no paragraphs")
        return self.index, self.documents

    def run(self, question, question_id=None):
        if isinstance(question, str):
            question = Question(question_id or "0", question)
        if not question.question.strip():
            raise InputError("question must be non-empty")
        cfg = self.config.pipeline
        state = PipelineState(current_query=question.question)
        try:
            index, documents = self._pool(question)
            terminal = False
            while state.round < cfg.max_iterations:
                record, selected = self._round(state, question.question_id, index, documents)
                if terminal or state.round == cfg.max_iterations:
                    break
                record.next_query = generate_next_query(
                    record.query, selected, self.backend, self.prompts, record.flags,
                )
                record.single_hop_decision = is_single_hop(
                    record.next_query, self.backend, self.prompts, cfg.single_hop_threshold, record.flags,
                )
                state.current_query = record.next_query
                terminal = record.single_hop_decision

            prompt = self.prompts.render_answer(question.question, state.accumulated_docs)
            answer = self.backend.generate(prompt).strip()
        except Exception as exc:
            self._write_trace(question.question_id, state, None, error=str(exc))
            raise
        self._write_trace(question.question_id, state, answer)
        logger.info("question %s answered after %d rounds", question.question_id, len(state.trace))
        return PipelineResult(question.question_id, answer, state)

    def _write_trace(self, question_id, state, answer, error=None):
        if self.trace_dir is None:
            return
        payload = state.trace_json(question_id, answer, self.config.snapshot(), error)
        atomic_write_json(self.trace_dir / trace_filename(question_id), payload)

    def run_many(self, questions, workers=None, progress=None):
        """Answer independent questions, fanning out over `workers` threads."""
        workers = workers or self.config.pipeline.workers
        if workers <= 1:
            results = []
            for question in questions:
                results.append(self.run(question))
                if progress is not None:
                    progress.update(1)
            return results
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(self.run, question) for question in questions]
            results = []
            for future in futures:
                results.append(future.result())
                if progress is not None:
                    progress.update(1)
            return results


def run_pipeline(question, backend, config, params, index=None, corpus=(), **kwargs):
    """Answer one question; returns (answer, PipelineState)."""
    result = Pipeline(backend, config, params, index, corpus, **kwargs).run(question)
    return result.answer, result.state


def build_pipeline(config, backend, trace_dir=None):
    """Pipeline wired from config paths: params, index and corpus when given."""
    paths = config.paths
    if paths.params is not None:
        params = load_params(paths.params)
    else:
        logger.warning("no trained encoder configured; using a seeded random projection")
        params = init_params(config.train)
    corpus = load_corpus(paths.corpus) if paths.corpus is not None else []
    index = None
    if paths.index is not None:
        if not corpus:
            raise InputError("an index needs the corpus it was built from (paths.corpus)")
        index = load_index(paths.index)
        if index.matrix.shape[1] != params.d_out:
            raise InputError(
                f"index {paths.index} has dimension {index.matrix.shape[1]}, encoder params give {params.d_out}"
            )
        unknown = set(index.doc_ids) - {doc.id for doc in corpus}
        if unknown:
            raise InputError(f"index holds {len(unknown)} ids missing from the corpus")
    elif corpus:
        index = build_index(corpus, params)
    return Pipeline(backend, config, params, index, corpus, trace_dir=trace_dir)
