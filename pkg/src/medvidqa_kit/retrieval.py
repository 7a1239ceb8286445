"""Video retrieval: similarity scoring, score fusion, ranking and trec run-file I/O.

The five named strategies:

- ``run1_orig_max``: original question, max over chunks, max over encoders
- ``run2_expanded``: generated answer text as the query (optionally max with run1)
- ``run3_fused``: reciprocal-rank fusion of run1 and run2
- ``run4_orig_mean``: original question, max over chunks, mean over encoders
- ``run5_text_to_vision``: question against per-frame features, max over frames
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .clients import EmbeddingClient, EmbeddingVector, ExpandedAnswer
from .corpus import Corpus, MedicalQuestion, VideoRecord, tokenize
from .errors import ConfigError, DataError, DimMismatch, NoChunks, NoFrames, ParseError, RunFormatError, ZeroVector
from .features import FrameFeatures, read_frame_features

logger = logging.getLogger(__name__)

STRATEGIES = (
    'run1_orig_max',
    'run2_expanded',
    'run3_fused',
    'run4_orig_mean',
    'run5_text_to_vision',
)
STRATEGY_ALIASES = {name.split('_', 1)[0]: name for name in STRATEGIES}
EXPANSION_MODES = ('expansion_only', 'max_with_original')
COMBINE_MODES = ('max', 'mean')
# Ranked scores are rounded to this many decimals, so scores that are equal in real
# arithmetic compare equal and fall back to the video_id tie-break
SCORE_DECIMALS = 9

Vector = Union[EmbeddingVector, Sequence[float], np.ndarray]


def resolve_strategy(name: str) -> str:
    """Accept a full strategy name or its short alias ('run1' ... 'run5')."""
    resolved = STRATEGY_ALIASES.get(name, name)
    if resolved not in STRATEGIES:
        raise ConfigError(f"Unknown strategy '{name}' (expected one of {', '.join(STRATEGIES)})")
    return resolved


@dataclass(frozen=True)
class RunEntry:
    query_id: str
    video_id: str
    rank: int
    score: float
    run_tag: str


# Grouped by query, each query ordered by rank
RunFile = list[RunEntry]


@dataclass
class StrategyConfig:
    """Retrieval strategy settings."""

    strategy: str = 'run1_orig_max'
    encoders: list[str] = field(default_factory=lambda: ['stub-256', 'stub-512'])
    k: int = 10
    chunk_tokens: int = 256
    chunk_stride: int = 128
    rrf_k: float = 60.0
    vision_encoder: str = 'stub-8'
    expansion_mode: str = 'expansion_only'
    run_tag: str = ""

    def __post_init__(self):
        self.strategy = resolve_strategy(self.strategy)
        if not self.encoders:
            raise ConfigError("At least one encoder is required")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.chunk_tokens < 1 or self.chunk_stride < 1:
            raise ConfigError("chunk_tokens and chunk_stride must be >= 1")
        if self.chunk_stride > self.chunk_tokens:
            raise ConfigError(
                f"chunk_stride ({self.chunk_stride}) must not exceed chunk_tokens ({self.chunk_tokens})"
            )
        if not self.rrf_k > 0:
            raise ConfigError(f"rrf_k must be > 0, got {self.rrf_k}")
        if self.expansion_mode not in EXPANSION_MODES:
            raise ConfigError(
                f"Unknown expansion_mode '{self.expansion_mode}' (expected one of {', '.join(EXPANSION_MODES)})"
            )
        if not self.run_tag:
            self.run_tag = self.strategy


# -----------------------------------------------------------------------
# Similarity
# -----------------------------------------------------------------------


def _as_array(v: Vector) -> np.ndarray:
    if isinstance(v, EmbeddingVector):
        return np.asarray(v.values, dtype=np.float64)
    return np.asarray(v, dtype=np.float64)


def cosine(u: Vector, v: Vector) -> float:
    """Cosine similarity u·v / (‖u‖‖v‖), clamped to [-1, 1].

    Raises:
        DimMismatch: If the vectors differ in length
        ZeroVector: If either vector has zero norm
    """
    a, b = _as_array(u), _as_array(v)
    if a.shape != b.shape:
        raise DimMismatch(f"Cannot compare vectors of dim {a.shape[0]} and {b.shape[0]}")
    norm_a, norm_b = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("Cosine similarity is undefined for a zero vector")
    return float(min(1.0, max(-1.0, float(np.dot(a, b)) / (norm_a * norm_b))))


def chunk_tokens(tokens: Sequence[str], chunk_tokens: int, chunk_stride: int) -> list[str]:
    """Split tokens into overlapping windows joined back into text.

    Windows start at 0, stride, 2*stride, ... and the last one ends at the token count.
    """
    if not tokens:
        return []
    chunks = []
    for start in range(0, len(tokens), chunk_stride):
        chunks.append(" ".join(tokens[start:start + chunk_tokens]))
        if start + chunk_tokens >= len(tokens):
            break
    return chunks


def video_chunks(video: VideoRecord, config: StrategyConfig) -> list[str]:
    tokens = [tok for seg in video.segments for tok in tokenize(seg.text)]
    return chunk_tokens(tokens, config.chunk_tokens, config.chunk_stride)


def score_query_video(
    q_embs: Mapping[str, EmbeddingVector],
    chunk_embs: Mapping[str, Sequence[EmbeddingVector]],
    combine: str = 'max',
) -> float:
    """Score a video for a query: max over chunks per encoder, then max or mean over encoders.

    Args:
        q_embs: Query embedding per encoder
        chunk_embs: Chunk embeddings per encoder (same encoder set as q_embs)
        combine: 'max' (runs 1 and 2) or 'mean' (run 4)

    Raises:
        NoChunks: If an encoder has no chunk embeddings
    """
    if combine not in COMBINE_MODES:
        raise ValueError(f"combine must be one of {COMBINE_MODES}, got {combine!r}")
    if set(q_embs) != set(chunk_embs):
        raise DataError(f"Encoder sets differ: {sorted(q_embs)} vs {sorted(chunk_embs)}")
    if not q_embs:
        raise NoChunks("No encoders to score with")

    per_encoder = []
    for encoder in sorted(q_embs):
        chunks = chunk_embs[encoder]
        if not chunks:
            raise NoChunks(f"No chunks to score for encoder {encoder}")
        per_encoder.append(max(cosine(q_embs[encoder], c) for c in chunks))

    if combine == 'max':
        return max(per_encoder)
    return sum(per_encoder) / len(per_encoder)


def sim_final(sim_orig: float, sim_expanded: float | None = None) -> float:
    """Max of the original and expanded similarities; the original alone when expansion is absent."""
    if sim_expanded is None:
        return sim_orig
    return max(sim_orig, sim_expanded)


def frame_scores(q_emb: Vector, frames: FrameFeatures | np.ndarray) -> np.ndarray:
    """Cosine of the query against every frame row."""
    matrix = frames.matrix if isinstance(frames, FrameFeatures) else np.asarray(frames, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise NoFrames("Frame feature matrix has no frames")
    q = _as_array(q_emb)
    if matrix.shape[1] != q.shape[0]:
        raise DimMismatch(f"Query dim {q.shape[0]} does not match frame feature dim {matrix.shape[1]}")
    q_norm = float(np.linalg.norm(q))
    row_norms = np.linalg.norm(matrix, axis=1)
    if q_norm == 0.0 or np.any(row_norms == 0.0):
        raise ZeroVector("Cosine similarity is undefined for a zero vector")
    return np.clip(matrix @ q / (row_norms * q_norm), -1.0, 1.0)


def text_to_vision_score(q_emb: Vector, frames: FrameFeatures | np.ndarray) -> float:
    """Max-pool the query's cosine similarity over all frames.

    Raises:
        NoFrames: If the matrix has zero rows
        DimMismatch: If the frame dim differs from the query dim
    """
    return float(np.max(frame_scores(q_emb, frames)))


# -----------------------------------------------------------------------
# Ranking and fusion
# -----------------------------------------------------------------------


def rank_videos(scores: Mapping[str, float], k: int, query_id: str = "", run_tag: str = "") -> list[RunEntry]:
    """Rank by descending score, ties by ascending video_id, keeping the top k.

    Scores are rounded to SCORE_DECIMALS before ranking and are reported rounded.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rounded = {vid: round(score, SCORE_DECIMALS) for vid, score in scores.items()}
    ordered = sorted(rounded.items(), key=lambda item: (-item[1], item[0]))[:k]
    return [RunEntry(query_id, vid, rank, score, run_tag) for rank, (vid, score) in enumerate(ordered, start=1)]


def group_by_query(run: Iterable[RunEntry]) -> dict[str, list[RunEntry]]:
    """Entries per query, queries in first-appearance order, entries by rank."""
    grouped: dict[str, list[RunEntry]] = {}
    for entry in run:
        grouped.setdefault(entry.query_id, []).append(entry)
    for entries in grouped.values():
        entries.sort(key=lambda e: e.rank)
    return grouped


def fuse_runs(a: Sequence[RunEntry], b: Sequence[RunEntry], rrf_k: float,
              k: int | None = None, run_tag: str = 'run3_fused') -> list[RunEntry]:
    """Reciprocal-rank fusion: score(v) = sum over runs containing v of 1 / (rrf_k + rank).

    A query present in only one run is fused from that run alone. Queries are
    emitted in ascending query_id order so the result does not depend on
    argument order.
    """
    if not rrf_k > 0:
        raise ConfigError(f"rrf_k must be > 0, got {rrf_k}")
    fused: dict[str, dict[str, float]] = {}
    for run in (a, b):
        for entry in run:
            scores = fused.setdefault(entry.query_id, {})
            scores[entry.video_id] = scores.get(entry.video_id, 0.0) + 1.0 / (rrf_k + entry.rank)

    result = []
    for qid in sorted(fused):
        scores = fused[qid]
        result.extend(rank_videos(scores, k or len(scores), qid, run_tag))
    return result


# -----------------------------------------------------------------------
# Run files
# -----------------------------------------------------------------------


def _check_run(entries: Sequence[RunEntry]) -> None:
    for qid, group in group_by_query(entries).items():
        ranks = [e.rank for e in group]
        if ranks != list(range(1, len(group) + 1)):
            raise RunFormatError(f"Query {qid}: ranks {ranks} are not contiguous from 1")
        for prev, cur in zip(group, group[1:]):
            if cur.score > prev.score:
                raise RunFormatError(f"Query {qid}: score increases at rank {cur.rank}")


def write_run(entries: Sequence[RunEntry]) -> bytes:
    """Serialize to trec run lines "query_id Q0 video_id rank score run_tag".

    Raises:
        RunFormatError: If ranks are not contiguous or scores increase with rank
    """
    _check_run(entries)
    lines = [f"{e.query_id} Q0 {e.video_id} {e.rank} {e.score:.6f} {e.run_tag}\n" for e in entries]
    return "".join(lines).encode('utf-8')


def read_run(raw: bytes | str, path: object = None) -> list[RunEntry]:
    """Parse trec run lines.

    Raises:
        ParseError: On a malformed line (carries the line number)
        RunFormatError: If the bytes are not UTF-8
    """
    try:
        text = raw.decode('utf-8-sig') if isinstance(raw, bytes) else raw
    except UnicodeDecodeError as e:
        raise RunFormatError(f"{path or 'run'}: not valid UTF-8 ({e.reason} at byte {e.start})") from e
    entries = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 6:
            raise ParseError(f"expected 6 fields, got {len(fields)}", line_no, path)
        qid, _, vid, rank, score, tag = fields
        try:
            entries.append(RunEntry(qid, vid, int(rank), float(score), tag))
        except ValueError as e:
            raise ParseError(f"bad rank or score: {e}", line_no, path)
    return entries


def write_run_file(path: Path, entries: Sequence[RunEntry]) -> None:
    Path(path).write_bytes(write_run(entries))


def read_run_file(path: Path) -> list[RunEntry]:
    return read_run(Path(path).read_bytes(), path)


# -----------------------------------------------------------------------
# Strategies over a corpus
# -----------------------------------------------------------------------


def _embed_by_encoder(texts: list[str], encoders: Sequence[str],
                      embedder: EmbeddingClient) -> dict[str, list[EmbeddingVector]]:
    return {enc: embedder.embed_texts(texts, enc) for enc in encoders}


def _chunk_embeddings(corpus: Corpus, config: StrategyConfig,
                      embedder: EmbeddingClient) -> dict[str, dict[str, list[EmbeddingVector]]]:
    """Chunk embeddings per video, per encoder."""
    chunk_map = {}
    for video in corpus:
        chunks = video_chunks(video, config)
        if not chunks:
            logger.warning("Video %s has no transcript tokens; it will not be ranked", video.video_id)
            continue
        chunk_map[video.video_id] = chunks

    flat = [text for chunks in chunk_map.values() for text in chunks]
    if not flat:
        raise NoChunks("No video in the corpus has transcript text")
    embedded = _embed_by_encoder(flat, config.encoders, embedder)

    result: dict[str, dict[str, list[EmbeddingVector]]] = {}
    offset = 0
    for vid, chunks in chunk_map.items():
        result[vid] = {enc: embedded[enc][offset:offset + len(chunks)] for enc in config.encoders}
        offset += len(chunks)
    return result


def _text_scores(question_embs: list[dict[str, EmbeddingVector]],
                 chunk_embs: dict[str, dict[str, list[EmbeddingVector]]],
                 combine: str, workers: int) -> list[dict[str, float]]:
    def one(q_embs: dict[str, EmbeddingVector]) -> dict[str, float]:
        return {vid: score_query_video(q_embs, per_enc, combine) for vid, per_enc in chunk_embs.items()}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, question_embs))


def _per_question(embedded: dict[str, list[EmbeddingVector]], count: int) -> list[dict[str, EmbeddingVector]]:
    return [{enc: vectors[i] for enc, vectors in embedded.items()} for i in range(count)]


def _rank_all(questions: Sequence[MedicalQuestion], score_maps: Sequence[Mapping[str, float]],
              k: int, run_tag: str) -> list[RunEntry]:
    run = []
    for q, scores in zip(questions, score_maps):
        run.extend(rank_videos(scores, k, q.query_id, run_tag))
    return run


def _orig_scores(questions, chunk_embs, config, embedder, combine, workers):
    q_embs = _per_question(_embed_by_encoder([q.text for q in questions], config.encoders, embedder),
                           len(questions))
    return _text_scores(q_embs, chunk_embs, combine, workers)


def _expanded_scores(questions, expansions, chunk_embs, orig_scores, config, embedder, workers):
    by_qid = {e.query_id: e for e in expansions}
    usable = [i for i, q in enumerate(questions)
              if q.query_id in by_qid and not by_qid[q.query_id].fallback]
    for q in questions:
        if q.query_id not in by_qid or by_qid[q.query_id].fallback:
            logger.info("No expansion for %s; using the original question score", q.query_id)

    expanded: dict[int, dict[str, float]] = {}
    if usable:
        texts = [by_qid[questions[i].query_id].text for i in usable]
        q_embs = _per_question(_embed_by_encoder(texts, config.encoders, embedder), len(usable))
        for i, scores in zip(usable, _text_scores(q_embs, chunk_embs, 'max', workers)):
            expanded[i] = scores

    result = []
    for i, orig in enumerate(orig_scores):
        if i not in expanded:
            result.append(dict(orig))
        elif config.expansion_mode == 'max_with_original':
            result.append({vid: sim_final(orig[vid], expanded[i][vid]) for vid in orig})
        else:
            result.append(expanded[i])
    return result


def _vision_scores(corpus: Corpus, questions, config: StrategyConfig,
                   embedder: EmbeddingClient, workers: int) -> list[dict[str, float]]:
    frames = {}
    for video in corpus:
        if video.frame_features_path is None:
            logger.info("Video %s has no frame features; skipped by %s", video.video_id, config.strategy)
            continue
        frames[video.video_id] = read_frame_features(video.frame_features_path)
    if not frames:
        logger.warning("No video has frame features; %s returns an empty run", config.strategy)
        return [{} for _ in questions]

    q_embs = embedder.embed_texts([q.text for q in questions], config.vision_encoder)

    def one(q_emb: EmbeddingVector) -> dict[str, float]:
        return {vid: text_to_vision_score(q_emb, f) for vid, f in frames.items()}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, q_embs))


def retrieve(
    corpus: Corpus,
    questions: Sequence[MedicalQuestion],
    expansions: Sequence[ExpandedAnswer],
    config: StrategyConfig,
    embedder: EmbeddingClient,
    workers: int = 1,
) -> list[RunEntry]:
    """Produce a run file for the configured strategy.

    Args:
        corpus: Videos to rank
        questions: Queries in topics-file order (the run follows this order)
        expansions: Expanded answers (used by run2 and run3; may be empty otherwise)
        config: Strategy settings
        embedder: Embedding client shared by all encoders
        workers: Scoring parallelism; never changes the output

    Returns:
        Run entries grouped by query, each query ranked 1..n
    """
    if not questions:
        return []
    logger.info("Retrieving %d queries over %d videos with %s", len(questions), len(corpus), config.strategy)

    if config.strategy == 'run5_text_to_vision':
        return _rank_all(questions, _vision_scores(corpus, questions, config, embedder, workers),
                         config.k, config.run_tag)

    chunk_embs = _chunk_embeddings(corpus, config, embedder)
    combine = 'mean' if config.strategy == 'run4_orig_mean' else 'max'
    orig = _orig_scores(questions, chunk_embs, config, embedder, combine, workers)
    if config.strategy in ('run1_orig_max', 'run4_orig_mean'):
        return _rank_all(questions, orig, config.k, config.run_tag)

    expanded = _expanded_scores(questions, expansions, chunk_embs, orig, config, embedder, workers)
    if config.strategy == 'run2_expanded':
        return _rank_all(questions, expanded, config.k, config.run_tag)

    # run3: fuse the full rankings, then cut at k
    full = len(chunk_embs)
    run1 = _rank_all(questions, orig, full, 'run1_orig_max')
    run2 = _rank_all(questions, expanded, full, 'run2_expanded')
    fused = group_by_query(fuse_runs(run1, run2, config.rrf_k, config.k, config.run_tag))
    return [entry for q in questions for entry in fused.get(q.query_id, [])]
