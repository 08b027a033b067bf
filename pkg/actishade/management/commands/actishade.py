"""
`python manage.py actishade <subcommand>`: every ActiShade workflow.

Exit codes: 0 on success, 1 on input/config/domain errors, 2 when the model
backend is unreachable or fails.
"""
import logging
import sys
from pathlib import Path

from django.conf import settings
from django.core.management import call_command
from django.core.management.base import BaseCommand, CommandError
from tqdm import tqdm

from actishade.backend import connect
from actishade.config import load_run_config
from actishade.errors import (
    ActiShadeError, ConfigError, DetectionError, InputError, MalformedRecord, NoCandidates, TransportError,
)
from actishade.evaluation import evaluate, load_predictions, sweep_csv, sweep_sigma
from actishade.gap import ScriptedDetector, detector_for
from actishade.keyphrase import annotator_for, extract_candidates
from actishade.orchestrator import build_pipeline, load_questions
from actishade.retriever import (
    TIERS, build_index, corpus_from_records, iter_tiered, label_musique, load_corpus, load_musique, load_params,
    ranked_runs, recall_at_k, save_index, save_params, train, write_tiered,
)
from actishade.toy import ToyModel
from actishade.utils import atomic_write_json, atomic_write_jsonl, atomic_write_text
from actishade.views import install_model

logger = logging.getLogger('actishade.cli')

SUBCOMMANDS = {
    'serve-backend': 'Serve the seeded toy model over HTTP.',
    'extract': 'Write candidate keyphrases for every question.',
    'detect': 'Write the overshadowed keyphrase of every question.',
    'label': 'Build tiered training examples from MuSiQue records.',
    'train': 'Train the keyphrase-conditioned retriever.',
    'index': 'Encode a corpus into a retrieval index.',
    'run': 'Answer questions with the iterative pipeline.',
    'eval': 'Score predictions (Cover-EM, F1) or retriever recall.',
    'sweep-sigma': 'Run the pipeline for several noise scales.',
}
DEFAULT_SIGMAS = '0.05,0.1,0.2,0.3,0.4,0.5'


def _add_common(parser):
    parser.add_argument('--config', help='JSON experiment config (with a "version" field).')
    parser.add_argument('--sigma', type=float)
    parser.add_argument('--alpha', type=float)
    parser.add_argument('--k', type=int)
    parser.add_argument('--max-iterations', type=int)
    parser.add_argument('--method', choices=['gap', 'coda', 'none'])
    parser.add_argument('--selection', choices=['yes-prob', 'top-score'])
    parser.add_argument('--seed', type=int)
    parser.add_argument('--workers', type=int)
    parser.add_argument('--out', help='Output directory.')
    parser.add_argument('--dataset')
    parser.add_argument('--corpus')
    parser.add_argument('--params')
    parser.add_argument('--index')
    parser.add_argument('--scores', help='Scripted keyphrase score table (JSON).')
    parser.add_argument('--quiet', action='store_true', help='Disable progress bars.')


def _parse_sigmas(text):
    try:
        return [float(part) for part in text.split(',') if part.strip()]
    except ValueError as exc:
        raise InputError(f'--sigmas must be a comma-separated list of numbers, got {text!r}') from exc


class Command(BaseCommand):
    help = 'ActiShade: overshadowed-keyphrase detection, retrieval training and the iterative QA pipeline.'

    def add_arguments(self, parser):
        subparsers = parser.add_subparsers(dest='subcommand', required=True)
        for name, help_text in SUBCOMMANDS.items():
            sub = subparsers.add_parser(name, help=help_text)
            _add_common(sub)
            if name == 'serve-backend':
                sub.add_argument('--addrport', default='127.0.0.1:8000')
            elif name == 'eval':
                sub.add_argument('--predictions', help='predictions JSONL (default <out>/predictions.jsonl)')
                sub.add_argument('--recall', action='store_true', help='Report retriever Recall@1/3 instead.')
            elif name == 'train':
                sub.add_argument('--strategy', choices=['base', 'scl', 'fcl'],
                                 help='fcl: three-tier loss (default); scl: positive vs rest; base: untrained.')
            elif name == 'sweep-sigma':
                sub.add_argument('--sigmas', default=DEFAULT_SIGMAS)

    def handle(self, *args, **options):
        subcommand = options['subcommand']
        handler = getattr(self, 'handle_' + subcommand.replace('-', '_'))
        self.progress = not options['quiet'] and sys.stderr.isatty()
        try:
            config = load_run_config(options.get('config'), flags=options)
            handler(config, options)
        except TransportError as e:
            raise CommandError(f'{subcommand}: {e}', returncode=2) from e
        except ActiShadeError as e:
            raise CommandError(f'{subcommand}: {e}', returncode=1) from e

    # Helpers

    def _out(self, config):
        out = config.paths.output or settings.ACTISHADE['OUTPUT_DIR']
        return Path(out)

    def _require(self, config, field, subcommand):
        value = getattr(config.paths, field)
        if value is None:
            raise ConfigError(f'{subcommand} needs --{field} (paths.{field})')
        return value

    def _report(self, message):
        self.stdout.write(message)

    # Subcommands

    def handle_serve_backend(self, config, options):
        install_model(ToyModel.from_config(config.backend))
        call_command('runserver', options['addrport'], use_reloader=False)

    def handle_extract(self, config, options):
        questions = load_questions(self._require(config, 'dataset', 'extract'))
        backend = connect(config.backend)
        annotator = annotator_for(config.paths)
        rows = []
        for q in questions:
            try:
                candidates = extract_candidates(q.question, backend.tokenize(q.question), annotator, q.question_id)
                found = [
                    {'text': c.text, 'char_span': list(c.char_span), 'token_span': list(c.token_span), 'label': c.label}
                    for c in candidates
                ]
            except NoCandidates:
                logger.warning('question %s has no keyphrase candidates', q.question_id)
                found = []
            rows.append({'query_id': q.question_id, 'query': q.question, 'candidates': found})
        path = atomic_write_jsonl(self._out(config) / 'candidates.jsonl', rows)
        self._report(f'wrote {len(rows)} candidate sets to {path}')

    def handle_detect(self, config, options):
        questions = load_questions(self._require(config, 'dataset', 'detect'))
        detector = detector_for(config.pipeline.detection_method, config.detection)
        if detector is None:
            raise ConfigError('detect needs --method gap or coda')
        backend = connect(config.backend)
        annotator = annotator_for(config.paths)
        rows = []
        for q in tqdm(questions, desc='detect', disable=not self.progress):
            try:
                candidates = extract_candidates(q.question, backend.tokenize(q.question), annotator, q.question_id)
            except NoCandidates:
                if not isinstance(detector, ScriptedDetector):
                    logger.warning('question %s has no keyphrase candidates; skipped', q.question_id)
                    continue
                logger.info('question %s has no keyphrase candidates; using the scripted phrases', q.question_id)
                candidates = None
            try:
                report = detector.detect(q.question, candidates, backend)
            except (NoCandidates, DetectionError) as e:
                logger.warning('question %s skipped: %s', q.question_id, e)
                continue
            rows.append(report.to_json(q.question_id))
        path = atomic_write_jsonl(self._out(config) / 'detections.jsonl', rows)
        self._report(f'wrote {len(rows)} detections to {path}')

    def handle_label(self, config, options):
        records = load_musique(self._require(config, 'dataset', 'label'))
        examples = []
        for number, record in enumerate(records, start=1):
            try:
                examples.append(label_musique(record))
            except MalformedRecord as e:
                logger.warning('record %s skipped: %s', record.get('id', number), e)
        if not examples:
            raise InputError('no record could be labelled')
        out = self._out(config)
        write_tiered(out / 'tiered.jsonl', examples)
        corpus = corpus_from_records(records)
        atomic_write_jsonl(out / 'corpus.jsonl', [doc.to_json() for doc in corpus])
        self._report(f'labelled {len(examples)} of {len(records)} records; corpus has {len(corpus)} paragraphs')

    def handle_train(self, config, options):
        dataset = list(iter_tiered(self._require(config, 'dataset', 'train')))
        corpus = load_corpus(self._require(config, 'corpus', 'train'))
        params = train(dataset, corpus, config.train, progress=self.progress)
        path = save_params(self._out(config) / 'params.json', params)
        self._report(f'wrote {config.train.strategy} encoder parameters to {path}')

    def handle_index(self, config, options):
        corpus = load_corpus(self._require(config, 'corpus', 'index'))
        params = load_params(self._require(config, 'params', 'index'))
        path = save_index(self._out(config) / 'index.npz', build_index(corpus, params))
        self._report(f'indexed {len(corpus)} documents into {path}')

    def handle_run(self, config, options):
        questions = load_questions(self._require(config, 'dataset', 'run'))
        out = self._out(config)
        backend = connect(config.backend)
        pipeline = build_pipeline(config, backend, trace_dir=out / 'traces')
        with tqdm(total=len(questions), desc='run', disable=not self.progress) as bar:
            results = pipeline.run_many(questions, config.pipeline.workers, progress=bar)
        rows = [
            {'question_id': r.question_id, 'prediction': r.answer, 'gold': list(q.gold)}
            for r, q in zip(results, questions)
        ]
        path = atomic_write_jsonl(out / 'predictions.jsonl', rows)
        self._report(f'answered {len(rows)} questions; predictions in {path}')

    def handle_eval(self, config, options):
        out = self._out(config)
        if options.get('recall'):
            examples = list(iter_tiered(self._require(config, 'dataset', 'eval')))
            corpus = load_corpus(self._require(config, 'corpus', 'eval'))
            params = load_params(self._require(config, 'params', 'eval'))
            runs = ranked_runs(examples, corpus, params)
            report = {}
            for tier in TIERS:
                try:
                    report[tier] = {f'recall@{k}': recall_at_k(runs, tier, k) for k in (1, 3)}
                except InputError as e:
                    logger.warning('%s', e)
            path = atomic_write_json(out / 'recall.json', report)
            self._report(f'wrote retriever recall to {path}')
            return

        predictions = Path(options.get('predictions') or out / 'predictions.jsonl')
        report = evaluate(load_predictions(predictions), workers=config.pipeline.workers)
        report.save(out / 'report.json', out / 'report.csv')
        self._report(f'n={report.n} acc={report.acc:.2f} f1={report.f1:.2f}')

    def handle_sweep_sigma(self, config, options):
        sigmas = _parse_sigmas(options['sigmas'])
        questions = load_questions(self._require(config, 'dataset', 'sweep-sigma'))
        backend = connect(config.backend)
        with tqdm(total=len(sigmas), desc='sweep', disable=not self.progress) as bar:
            rows = sweep_sigma(questions, sigmas, config, lambda swept: build_pipeline(swept, backend), progress=bar)
        path = atomic_write_text(self._out(config) / 'sweep.csv', sweep_csv(rows))
        self._report(f'wrote {len(rows)} sweep rows to {path}')
