"""Stage graph behind the CLI: ingest, retrieve, localize, stepcap and the two evaluations.

Every stage writes its artifacts to ``output_dir/<stage>/`` together with a
``.stage-key`` file: a digest of the stage's settings and of the artifacts it
consumes. A stage whose key is unchanged and whose artifacts exist is skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from functools import cached_property
from pathlib import Path
from typing import Any, Callable

from . import __version__
from .clients import ChatClient, EmbeddingClient, ExpandedAnswer, ServiceConfig, expand_questions
from .config import PipelineConfig
from .corpus import (
    Corpus,
    corpus_from_json,
    corpus_to_json,
    load_gold_steps,
    load_qrels,
    load_topics,
    step_sets_from_json,
    step_sets_to_json,
)
from .errors import ConfigError
from .localization import localize_run, write_localization_file
from .metrics import evaluate_retrieval, evaluate_steps, format_caption_report, format_retrieval_report
from .retrieval import group_by_query, read_run_file, retrieve, write_run_file
from .stepcap import caption_steps
from .transcripts import load_corpus

logger = logging.getLogger(__name__)

STAGE_KEY_FILE = ".stage-key"
EXPANDING_STRATEGIES = ('run2_expanded', 'run3_fused')

# stage -> stages whose artifacts it reads
DEPENDENCIES: dict[str, tuple[str, ...]] = {
    'ingest': (),
    'retrieve': ('ingest',),
    'localize': ('ingest', 'retrieve'),
    'stepcap': ('ingest',),
    'eval-retrieval': ('retrieve',),
    'eval-steps': ('stepcap',),
}
STAGES = tuple(DEPENDENCIES)

CORPUS_FILE = "corpus.json"
RUN_FILE = "run.txt"
EXPANSIONS_FILE = "expansions.json"
LOCALIZATIONS_FILE = "localizations.txt"
STEPS_FILE = "steps.json"
REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"


def canonical_json(data: Any) -> str:
    return json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_digest(root: Path) -> str:
    """Digest of every file under root (relative path and contents), in sorted order."""
    h = hashlib.sha256()
    for path in sorted(p for p in Path(root).rglob('*') if p.is_file()):
        h.update(path.relative_to(root).as_posix().encode('utf-8') + b"\x00")
        h.update(file_digest(path).encode('ascii') + b"\n")
    return h.hexdigest()


def _service_identity(service: ServiceConfig) -> dict[str, Any]:
    """Settings that change what a service returns (not how it is reached)."""
    identity: dict[str, Any] = {'backend': service.backend, 'model': service.model}
    if service.backend == 'stub':
        identity['stub_dim'] = service.stub_dim
        identity['fixtures'] = tree_digest(service.fixtures_dir) if service.fixtures_dir else None
    else:
        identity['endpoint'] = service.endpoint
        identity['seed'] = service.seed
    return identity


@dataclass
class StageResult:
    name: str
    skipped: bool
    outputs: list[Path] = field(default_factory=list)
    seconds: float = 0.0


class Pipeline:
    """Runs stages with their dependencies, skipping the ones whose inputs are unchanged."""

    def __init__(self, config: PipelineConfig,
                 embedder: EmbeddingClient | None = None, chat: ChatClient | None = None):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.results: list[StageResult] = []
        if embedder is not None:
            self.embedder = embedder
        if chat is not None:
            self.chat = chat

    # Clients are created on first use so stages that need no service never build one
    @cached_property
    def embedder(self) -> EmbeddingClient:
        return EmbeddingClient(self.config.embedding)

    @cached_property
    def chat(self) -> ChatClient:
        return ChatClient(self.config.chat)

    def stage_dir(self, stage: str) -> Path:
        return self.output_dir / stage

    def artifact(self, stage: str, name: str) -> Path:
        return self.stage_dir(stage) / name

    # -------------------------------------------------------------------
    # Stage keys
    # -------------------------------------------------------------------

    def _stage_inputs(self, stage: str) -> tuple[dict[str, Any], list[str]]:
        """Settings and input digests for a stage, plus the artifacts it produces."""
        cfg = self.config
        strategy = asdict(cfg.strategy)
        if stage == 'ingest':
            corpus_dir = cfg.require('corpus_dir')
            return {
                'corpus': tree_digest(corpus_dir),
                'cleaning': cfg.cleaning.rules,
            }, [CORPUS_FILE]
        if stage == 'retrieve':
            inputs = {
                'corpus': file_digest(self.artifact('ingest', CORPUS_FILE)),
                'topics': file_digest(cfg.require('topics_path')),
                'strategy': strategy,
                'embedding': _service_identity(cfg.embedding),
            }
            outputs = [RUN_FILE]
            if cfg.strategy.strategy in EXPANDING_STRATEGIES:
                inputs['chat'] = _service_identity(cfg.chat)
                outputs.append(EXPANSIONS_FILE)
            return inputs, outputs
        if stage == 'localize':
            return {
                'corpus': file_digest(self.artifact('ingest', CORPUS_FILE)),
                'run': file_digest(self.artifact('retrieve', RUN_FILE)),
                'topics': file_digest(cfg.require('topics_path')),
                'localization': asdict(cfg.localization),
                'embedding': _service_identity(cfg.embedding),
            }, [LOCALIZATIONS_FILE]
        if stage == 'stepcap':
            inputs = {
                'corpus': file_digest(self.artifact('ingest', CORPUS_FILE)),
                'topics': file_digest(cfg.require('topics_path')),
                'chat': _service_identity(cfg.chat),
            }
            if cfg.gold_steps_path is not None:
                inputs['gold_steps'] = file_digest(cfg.require('gold_steps_path'))
            else:
                inputs['run'] = file_digest(self.artifact('retrieve', RUN_FILE))
            return inputs, [STEPS_FILE]
        if stage == 'eval-retrieval':
            return {
                'run': file_digest(self.artifact('retrieve', RUN_FILE)),
                'qrels': file_digest(cfg.require('qrels_path')),
                'ndcg_cutoff': cfg.ndcg_cutoff,
            }, [REPORT_JSON, REPORT_TEXT]
        if stage == 'eval-steps':
            return {
                'steps': file_digest(self.artifact('stepcap', STEPS_FILE)),
                'gold_steps': file_digest(cfg.require('gold_steps_path')),
            }, [REPORT_JSON, REPORT_TEXT]
        raise ConfigError(f"Unknown stage '{stage}' (expected one of {', '.join(STAGES)})")

    def stage_key(self, stage: str) -> str:
        inputs, _ = self._stage_inputs(stage)
        payload = json.dumps({'stage': stage, 'inputs': inputs}, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()

    def _is_current(self, stage: str, key: str, outputs: list[str]) -> bool:
        key_file = self.artifact(stage, STAGE_KEY_FILE)
        if not key_file.is_file() or key_file.read_text(encoding='utf-8').strip() != key:
            return False
        return all(self.artifact(stage, name).is_file() for name in outputs)

    # -------------------------------------------------------------------
    # Running
    # -------------------------------------------------------------------

    def plan(self, target: str) -> list[str]:
        """The target and everything it depends on, in execution order."""
        if target not in DEPENDENCIES:
            raise ConfigError(f"Unknown stage '{target}' (expected one of {', '.join(STAGES)})")
        order: list[str] = []

        def visit(stage: str) -> None:
            deps = DEPENDENCIES[stage]
            if stage == 'stepcap' and self.config.gold_steps_path is None:
                deps = deps + ('retrieve',)
            for dep in deps:
                visit(dep)
            if stage not in order:
                order.append(stage)

        visit(target)
        return order

    def run_stage(self, stage: str) -> StageResult:
        key = self.stage_key(stage)
        _, outputs = self._stage_inputs(stage)
        paths = [self.artifact(stage, name) for name in outputs]
        if self._is_current(stage, key, outputs):
            logger.info("Stage %s is up to date; skipped", stage)
            result = StageResult(stage, True, paths)
        else:
            logger.info("Running stage %s", stage)
            started = time.perf_counter()
            self.stage_dir(stage).mkdir(parents=True, exist_ok=True)
            # A stale key must not survive a failed rerun
            self.artifact(stage, STAGE_KEY_FILE).unlink(missing_ok=True)
            STAGE_FUNCTIONS[stage](self)
            self.artifact(stage, STAGE_KEY_FILE).write_text(key + "\n", encoding='utf-8')
            result = StageResult(stage, False, paths, time.perf_counter() - started)
        self.results.append(result)
        return result

    def run(self, target: str) -> list[StageResult]:
        """Run a stage after its dependencies (the ``execute`` entry point)."""
        started_at = datetime.now(timezone.utc)
        results = [self.run_stage(stage) for stage in self.plan(target)]
        self._write_metadata(started_at)
        return results

    def run_all(self) -> list[StageResult]:
        """Run every stage the configuration has inputs for, then write the summary."""
        started_at = datetime.now(timezone.utc)
        targets = ['localize', 'stepcap']
        if self.config.qrels_path is not None:
            targets.append('eval-retrieval')
        if self.config.gold_steps_path is not None:
            targets.append('eval-steps')

        done: set[str] = set()
        for target in targets:
            for stage in self.plan(target):
                if stage not in done:
                    self.run_stage(stage)
                    done.add(stage)
        self._write_summary()
        self._write_metadata(started_at)
        return self.results

    def _write_summary(self) -> None:
        summary: dict[str, Any] = {'version': __version__}
        for stage, name in (('eval-retrieval', 'retrieval'), ('eval-steps', 'captions')):
            report = self.artifact(stage, REPORT_JSON)
            if report.is_file():
                summary[name] = json.loads(report.read_text(encoding='utf-8'))
        (self.output_dir / "summary.json").write_text(canonical_json(summary), encoding='utf-8')

    def _write_metadata(self, started_at: datetime) -> None:
        """Timestamps and durations live only here."""
        metadata = {
            'version': __version__,
            'started_at': started_at.isoformat(),
            'finished_at': datetime.now(timezone.utc).isoformat(),
            'config_sources': [str(p) for p in self.config.sources],
            'stages': [
                {'name': r.name, 'skipped': r.skipped, 'seconds': round(r.seconds, 3)}
                for r in self.results
            ],
        }
        self.output_dir.mkdir(parents=True, exist_ok=True)
        (self.output_dir / "metadata.json").write_text(canonical_json(metadata), encoding='utf-8')

    # -------------------------------------------------------------------
    # Artifact loading
    # -------------------------------------------------------------------

    def load_corpus_artifact(self) -> Corpus:
        data = json.loads(self.artifact('ingest', CORPUS_FILE).read_text(encoding='utf-8'))
        return corpus_from_json(data, self.config.require('corpus_dir'))


# -----------------------------------------------------------------------
# Stage bodies
# -----------------------------------------------------------------------


def _ingest(p: Pipeline) -> None:
    corpus_dir = p.config.require('corpus_dir')
    corpus = load_corpus(corpus_dir, p.config.cleaning)
    data = corpus_to_json(corpus, corpus_dir)
    p.artifact('ingest', CORPUS_FILE).write_text(canonical_json(data), encoding='utf-8')


def _expansions_to_json(expansions: list[ExpandedAnswer]) -> list[dict[str, Any]]:
    return [asdict(e) for e in expansions]


def _retrieve(p: Pipeline) -> None:
    cfg = p.config
    corpus = p.load_corpus_artifact()
    questions = load_topics(cfg.require('topics_path'))
    expansions: list[ExpandedAnswer] = []
    if cfg.strategy.strategy in EXPANDING_STRATEGIES:
        expansions = expand_questions(questions, p.chat, cfg.workers)
        p.artifact('retrieve', EXPANSIONS_FILE).write_text(
            canonical_json(_expansions_to_json(expansions)), encoding='utf-8'
        )
    run = retrieve(corpus, questions, expansions, cfg.strategy, p.embedder, cfg.workers)
    write_run_file(p.artifact('retrieve', RUN_FILE), run)


def _localize(p: Pipeline) -> None:
    cfg = p.config
    records = localize_run(
        p.load_corpus_artifact(),
        load_topics(cfg.require('topics_path')),
        read_run_file(p.artifact('retrieve', RUN_FILE)),
        cfg.localization,
        p.embedder,
        cfg.workers,
    )
    write_localization_file(p.artifact('localize', LOCALIZATIONS_FILE), records)


def _stepcap(p: Pipeline) -> None:
    cfg = p.config
    questions = load_topics(cfg.require('topics_path'))
    if cfg.gold_steps_path is not None:
        keys = [s.key for s in load_gold_steps(cfg.require('gold_steps_path'))]
    else:
        by_query = group_by_query(read_run_file(p.artifact('retrieve', RUN_FILE)))
        keys = [(q.query_id, by_query[q.query_id][0].video_id) for q in questions if by_query.get(q.query_id)]
    steps = caption_steps(p.load_corpus_artifact(), questions, keys, p.chat, cfg.workers)
    p.artifact('stepcap', STEPS_FILE).write_text(canonical_json(step_sets_to_json(steps)), encoding='utf-8')


def _write_report(p: Pipeline, stage: str, data: dict[str, Any], text: str) -> None:
    p.artifact(stage, REPORT_JSON).write_text(canonical_json(data), encoding='utf-8')
    p.artifact(stage, REPORT_TEXT).write_text(text + "\n", encoding='utf-8')


def _eval_retrieval(p: Pipeline) -> None:
    cfg = p.config
    report = evaluate_retrieval(
        read_run_file(p.artifact('retrieve', RUN_FILE)),
        load_qrels(cfg.require('qrels_path')),
        cfg.ndcg_cutoff,
    )
    _write_report(p, 'eval-retrieval', report.to_dict(), format_retrieval_report(report))


def _eval_steps(p: Pipeline) -> None:
    pred = step_sets_from_json(
        json.loads(p.artifact('stepcap', STEPS_FILE).read_text(encoding='utf-8')),
        p.artifact('stepcap', STEPS_FILE),
    )
    report = evaluate_steps(pred, load_gold_steps(p.config.require('gold_steps_path')))
    _write_report(p, 'eval-steps', report.to_dict(), format_caption_report(report))


STAGE_FUNCTIONS: dict[str, Callable[[Pipeline], None]] = {
    'ingest': _ingest,
    'retrieve': _retrieve,
    'localize': _localize,
    'stepcap': _stepcap,
    'eval-retrieval': _eval_retrieval,
    'eval-steps': _eval_steps,
}


def execute(command: str, config: PipelineConfig) -> list[StageResult]:
    """Run one CLI command's stage (with its dependencies) or the whole pipeline."""
    if command == 'pipeline':
        return pipeline(config)
    return Pipeline(config).run(command)


def pipeline(config: PipelineConfig) -> list[StageResult]:
    return Pipeline(config).run_all()
