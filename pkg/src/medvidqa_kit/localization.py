"""Temporal answer localization.

Span decoding over start/end score sequences, the token/time lookup table that
maps spans between the transcript and the video timeline, the IoU gate that
decides which predictor teaches the other, and inference-time reconciliation
of a textual and a visual prediction.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .clients import EmbeddingClient, EmbeddingVector
from .corpus import Corpus, MedicalQuestion, TimeSpan, VideoRecord, transcript_text
from .errors import (
    ConfigError,
    DataError,
    EmptySequence,
    NegativeLoss,
    NoCoverage,
    NoSegments,
    ParseError,
    TokenOutOfRange,
)
from .features import read_frame_features
from .retrieval import RunEntry, cosine, frame_scores, group_by_query

logger = logging.getLogger(__name__)

VISUAL = 'visual'
TEXTUAL = 'textual'
FUSED = 'fused'
MODALITIES = (VISUAL, TEXTUAL, FUSED)


@dataclass(frozen=True)
class TokenSpan:
    """Inclusive range of transcript token indices."""

    start_tok: int
    end_tok: int

    def __post_init__(self):
        if self.start_tok < 0 or self.end_tok < self.start_tok:
            raise DataError(f"Invalid token span ({self.start_tok}, {self.end_tok})")


@dataclass(frozen=True)
class LookupRow:
    segment_index: int
    start_tok: int
    end_tok: int
    start_s: float
    end_s: float


@dataclass(frozen=True)
class LookupTable:
    """Rows whose token ranges partition 0..N-1 in order, each with its time range."""

    rows: tuple[LookupRow, ...]

    def __post_init__(self):
        expected = 0
        for row in self.rows:
            if row.start_tok != expected or row.end_tok < row.start_tok:
                raise DataError(f"Lookup rows do not partition the token range at row {row.segment_index}")
            if not row.start_s < row.end_s:
                raise DataError(f"Lookup row {row.segment_index} has an empty time range")
            expected = row.end_tok + 1

    @property
    def token_count(self) -> int:
        return self.rows[-1].end_tok + 1 if self.rows else 0


@dataclass(frozen=True)
class SpanPrediction:
    span: TimeSpan
    confidence: float
    modality: str

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"Confidence {self.confidence} outside [0, 1]")
        if self.modality not in MODALITIES:
            raise DataError(f"Unknown modality '{self.modality}'")


@dataclass(frozen=True)
class ScoreSequence:
    """Per-position start and end scores emitted by a span predictor."""

    start_scores: tuple[float, ...]
    end_scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.start_scores) != len(self.end_scores):
            raise DataError(
                f"Start and end score lengths differ ({len(self.start_scores)} vs {len(self.end_scores)})"
            )
        if not all(math.isfinite(x) for x in self.start_scores + self.end_scores):
            raise DataError("Score sequence contains non-finite values")

    @property
    def positions(self) -> int:
        return len(self.start_scores)


class TransferDecision(Enum):
    NONE = 'none'
    VISUAL_TEACHES_TEXTUAL = 'visual_teaches_textual'
    TEXTUAL_TEACHES_VISUAL = 'textual_teaches_visual'


@dataclass
class LocalizationConfig:
    theta: float = 0.5
    window: int = 3
    tau: float = 0.8
    top_videos: int = 1
    text_encoder: str = 'stub-256'
    vision_encoder: str = 'stub-8'

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must be in [0, 1], got {self.theta}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be an odd integer >= 1, got {self.window}")
        if self.top_videos < 1:
            raise ConfigError(f"top_videos must be >= 1, got {self.top_videos}")


# -----------------------------------------------------------------------
# Spans and the lookup table
# -----------------------------------------------------------------------


def temporal_iou(a: TimeSpan, b: TimeSpan) -> float:
    """Intersection over union of two intervals on the real line."""
    inter = max(0.0, min(a.end_s, b.end_s) - max(a.start_s, b.start_s))
    union = max(a.end_s, b.end_s) - min(a.start_s, b.start_s)
    return inter / union if union > 0 else 0.0


def build_lookup(video: VideoRecord) -> LookupTable:
    """Map every transcript token to its own segment's time range.

    Raises:
        EmptyTranscript: If the video has no segments
    """
    _, offsets = transcript_text(video)
    rows = tuple(
        LookupRow(r.segment_index, r.start_tok, r.end_tok,
                  video.segments[r.segment_index].start_s, video.segments[r.segment_index].end_s)
        for r in offsets
    )
    return LookupTable(rows)


def frame_lookup(duration_s: float, frame_count: int) -> LookupTable:
    """One row per frame; frames cover [0, duration_s] uniformly."""
    if frame_count < 1:
        raise EmptySequence("Frame lookup needs at least one frame")
    return LookupTable(tuple(
        LookupRow(i, i, i, i * duration_s / frame_count, (i + 1) * duration_s / frame_count)
        for i in range(frame_count)
    ))


def token_span_to_time(table: LookupTable, s: TokenSpan) -> TimeSpan:
    """[min start_s, max end_s] over the rows covering the token span.

    Raises:
        TokenOutOfRange: If the span reaches past the last token
    """
    if s.end_tok >= table.token_count:
        raise TokenOutOfRange(f"Token {s.end_tok} out of range (table has {table.token_count} tokens)")
    covering = [r for r in table.rows if r.start_tok <= s.end_tok and s.start_tok <= r.end_tok]
    return TimeSpan(min(r.start_s for r in covering), max(r.end_s for r in covering))


def time_span_to_tokens(table: LookupTable, s: TimeSpan) -> TokenSpan:
    """[first token, last token] over rows whose time range overlaps the span.

    Rows that merely touch the span at an endpoint do not overlap it.

    Raises:
        NoCoverage: If no row overlaps the span
    """
    hits = [r for r in table.rows if r.start_s < s.end_s and s.start_s < r.end_s]
    if not hits:
        raise NoCoverage(f"Time span [{s.start_s}, {s.end_s}] overlaps no lookup row")
    return TokenSpan(min(r.start_tok for r in hits), max(r.end_tok for r in hits))


# -----------------------------------------------------------------------
# Span decoding
# -----------------------------------------------------------------------


def decode_span(s: ScoreSequence) -> tuple[TokenSpan, float]:
    """Best (i, j) with i <= j by start[i] + end[j], and its softmax confidence.

    Ties go to the smallest i, then the smallest j.

    Raises:
        EmptySequence: If the sequence has no positions
    """
    n = s.positions
    if n == 0:
        raise EmptySequence("Cannot decode a span from an empty score sequence")

    start = np.asarray(s.start_scores, dtype=np.float64)
    end = np.asarray(s.end_scores, dtype=np.float64)
    valid = np.triu(np.ones((n, n), dtype=bool))
    pair = np.where(valid, start[:, None] + end[None, :], -np.inf)

    # argmax returns the first maximum in row-major order
    i, j = divmod(int(np.argmax(pair)), n)
    best = pair[i, j]
    confidence = 1.0 / float(np.sum(np.exp(pair[valid] - best)))
    return TokenSpan(i, j), min(1.0, confidence)


def predict_span_from_scores(s: ScoreSequence, table: LookupTable, modality: str = TEXTUAL) -> SpanPrediction:
    """Decode the best token span and map it through the table to a time span."""
    tokens, confidence = decode_span(s)
    return SpanPrediction(token_span_to_time(table, tokens), confidence, modality)


def frame_score_sequence(scores: Sequence[float]) -> ScoreSequence:
    """Turn per-frame similarities into start/end scores at the edges of high-similarity plateaus.

    start[i] = s[i] - s[i-1] and end[j] = s[j] - s[j+1], with s[-1] = s[k] = 0.
    """
    padded = [0.0, *(float(x) for x in scores), 0.0]
    k = len(padded) - 2
    start = tuple(padded[i + 1] - padded[i] for i in range(k))
    end = tuple(padded[i + 1] - padded[i + 2] for i in range(k))
    return ScoreSequence(start, end)


def smooth(scores: Sequence[float], window: int) -> list[float]:
    """Centered moving average, truncated at the edges."""
    half = window // 2
    n = len(scores)
    out = []
    for i in range(n):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        out.append(math.fsum(scores[lo:hi]) / (hi - lo))
    return out


def select_relevant_run(scores: Sequence[float], window: int, tau: float) -> tuple[int, int, float]:
    """Pick the contiguous run of smoothed scores at or above the threshold with the largest total.

    The threshold is max - (1 - tau) * |max|. Earlier runs win ties.

    Returns:
        Tuple of (first index, last index, confidence)
    """
    if not scores:
        raise NoSegments("No segment scores to localize over")
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be an odd integer >= 1, got {window}")
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must be in (0, 1], got {tau}")

    smoothed = smooth(scores, window)
    peak = max(smoothed)
    threshold = peak - (1.0 - tau) * abs(peak)

    best: tuple[int, int] | None = None
    best_total = -math.inf
    i = 0
    while i < len(smoothed):
        if smoothed[i] < threshold:
            i += 1
            continue
        j = i
        while j + 1 < len(smoothed) and smoothed[j + 1] >= threshold:
            j += 1
        total = math.fsum(smoothed[i:j + 1])
        if total > best_total:
            best, best_total = (i, j), total
        i = j + 1

    assert best is not None
    a, b = best
    confidence = min(1.0, max(0.0, best_total / (b - a + 1)))
    return a, b, confidence


def segment_relevance_localizer(
    q_emb: EmbeddingVector,
    segment_embs: Sequence[EmbeddingVector],
    window: int,
    tau: float,
    table: LookupTable,
) -> SpanPrediction:
    """Textual localizer: the best run of query-relevant transcript segments.

    Args:
        q_emb: Question embedding
        segment_embs: One embedding per transcript segment, in segment order
        window: Odd smoothing window
        tau: Relative threshold in (0, 1]
        table: Lookup table of the same video (one row per segment)

    Raises:
        NoSegments: If there are no segment embeddings
    """
    if not segment_embs:
        raise NoSegments("No segment embeddings to localize over")
    if len(segment_embs) != len(table.rows):
        raise DataError(f"{len(segment_embs)} segment embeddings for {len(table.rows)} lookup rows")
    a, b, confidence = select_relevant_run([cosine(q_emb, e) for e in segment_embs], window, tau)
    rows = table.rows[a:b + 1]
    span = TimeSpan(min(r.start_s for r in rows), max(r.end_s for r in rows))
    return SpanPrediction(span, confidence, TEXTUAL)


# -----------------------------------------------------------------------
# Cross-modal transfer
# -----------------------------------------------------------------------


def one_way_gate(vis: SpanPrediction, txt: SpanPrediction, theta: float) -> TransferDecision:
    """Pick the teaching predictor when the two spans disagree.

    Agreement (IoU >= theta) or equal confidences mean no transfer.
    """
    if temporal_iou(vis.span, txt.span) >= theta:
        return TransferDecision.NONE
    if vis.confidence > txt.confidence:
        return TransferDecision.VISUAL_TEACHES_TEXTUAL
    if txt.confidence > vis.confidence:
        return TransferDecision.TEXTUAL_TEACHES_VISUAL
    return TransferDecision.NONE


def transfer_targets(teacher: SpanPrediction, table: LookupTable) -> Union[TokenSpan, TimeSpan]:
    """Express the teacher's span in the student's coordinates.

    A visual teacher yields a token span for the textual student. A textual
    teacher yields a time span snapped to the segment boundaries it covers.

    Raises:
        NoCoverage: If the teacher span overlaps no row of the table
    """
    tokens = time_span_to_tokens(table, teacher.span)
    if teacher.modality == VISUAL:
        return tokens
    return token_span_to_time(table, tokens)


def total_loss(l_visual: float, l_textual: float, l_transfer_visual: float, l_transfer_textual: float) -> float:
    """Sum of the two predictor losses and the two transfer losses (pass 0 for gated-off terms).

    Raises:
        NegativeLoss: If any term is negative
    """
    terms = (l_visual, l_textual, l_transfer_visual, l_transfer_textual)
    for term in terms:
        if math.isnan(term) or term == math.inf:
            raise DataError(f"Loss terms must be finite, got {term}")
        if term < 0:
            raise NegativeLoss(f"Loss terms must be non-negative, got {term}")
    return math.fsum(terms)


def reconcile(vis: SpanPrediction | None, txt: SpanPrediction | None, theta: float) -> SpanPrediction:
    """Combine the two predictions at inference time.

    One prediction: returned as is. Agreement (IoU >= theta): their intersection
    with the mean confidence. Disagreement: the gate's teacher, the textual
    prediction when the gate declines.
    """
    if vis is None and txt is None:
        raise NoSegments("No prediction to reconcile")
    if vis is None or txt is None:
        return vis or txt  # type: ignore[return-value]

    if temporal_iou(vis.span, txt.span) >= theta:
        start, end = max(vis.span.start_s, txt.span.start_s), min(vis.span.end_s, txt.span.end_s)
        if start < end:
            return SpanPrediction(TimeSpan(start, end), (vis.confidence + txt.confidence) / 2, FUSED)
        return vis if vis.confidence > txt.confidence else txt

    decision = one_way_gate(vis, txt, theta)
    logger.debug("Spans disagree (IoU %.3f < %.3f): %s", temporal_iou(vis.span, txt.span), theta, decision.value)
    return vis if decision is TransferDecision.VISUAL_TEACHES_TEXTUAL else txt


# -----------------------------------------------------------------------
# Inference
# -----------------------------------------------------------------------


def textual_prediction(video: VideoRecord, q_emb: EmbeddingVector, config: LocalizationConfig,
                       embedder: EmbeddingClient) -> SpanPrediction:
    table = build_lookup(video)
    segment_embs = embedder.embed_texts([seg.text for seg in video.segments], config.text_encoder)
    return segment_relevance_localizer(q_emb, segment_embs, config.window, config.tau, table)


def visual_prediction(video: VideoRecord, vision_q_emb: EmbeddingVector) -> SpanPrediction | None:
    if video.frame_features_path is None:
        return None
    frames = read_frame_features(video.frame_features_path)
    sequence = frame_score_sequence(frame_scores(vision_q_emb, frames).tolist())
    return predict_span_from_scores(sequence, frame_lookup(video.duration_s, frames.frame_count), VISUAL)


def localize(
    video: VideoRecord,
    question: MedicalQuestion,
    q_emb: EmbeddingVector,
    config: LocalizationConfig,
    embedder: EmbeddingClient,
) -> SpanPrediction:
    """Localize the answer to a question inside one video.

    Args:
        video: Retrieved video
        question: The question (embedded with the vision encoder for the visual path)
        q_emb: Question embedding from config.text_encoder
        config: Localization settings
        embedder: Embedding client for segments and the vision query

    Returns:
        The reconciled prediction; textual only when the video has no frame features
    """
    txt = textual_prediction(video, q_emb, config, embedder)
    vis = None
    if video.frame_features_path is not None:
        vision_q = embedder.embed_texts([question.text], config.vision_encoder)[0]
        vis = visual_prediction(video, vision_q)
    return reconcile(vis, txt, config.theta)


@dataclass(frozen=True)
class LocalizationRecord:
    query_id: str
    video_id: str
    span: TimeSpan
    confidence: float


def localize_run(
    corpus: Corpus,
    questions: Sequence[MedicalQuestion],
    run: Sequence[RunEntry],
    config: LocalizationConfig,
    embedder: EmbeddingClient,
    workers: int = 1,
) -> list[LocalizationRecord]:
    """Localize each question in its top retrieved videos, in topics order then rank."""
    by_query = group_by_query(run)
    jobs = [
        (q, corpus.get(entry.video_id))
        for q in questions
        for entry in by_query.get(q.query_id, [])[:config.top_videos]
    ]
    if not jobs:
        return []
    q_embs = embedder.embed_texts([q.text for q in questions], config.text_encoder)
    emb_by_qid = {q.query_id: e for q, e in zip(questions, q_embs)}

    def one(job: tuple[MedicalQuestion, VideoRecord]) -> LocalizationRecord:
        q, video = job
        pred = localize(video, q, emb_by_qid[q.query_id], config, embedder)
        return LocalizationRecord(q.query_id, video.video_id, pred.span, pred.confidence)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, jobs))


def write_localizations(records: Iterable[LocalizationRecord]) -> bytes:
    """Lines "query_id video_id start_s end_s confidence" (3-decimal seconds)."""
    return "".join(
        f"{r.query_id} {r.video_id} {r.span.start_s:.3f} {r.span.end_s:.3f} {r.confidence:.6f}\n"
        for r in records
    ).encode('utf-8')


def read_localizations(raw: bytes | str, path: object = None) -> list[LocalizationRecord]:
    try:
        text = raw.decode('utf-8-sig') if isinstance(raw, bytes) else raw
    except UnicodeDecodeError as e:
        raise DataError(f"{path or 'localizations'}: not valid UTF-8 ({e.reason} at byte {e.start})") from e
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ParseError(f"expected 5 fields, got {len(fields)}", line_no, path)
        try:
            records.append(LocalizationRecord(
                fields[0], fields[1], TimeSpan(float(fields[2]), float(fields[3])), float(fields[4])
            ))
        except ValueError as e:
            raise ParseError(str(e), line_no, path)
    return records


def write_localization_file(path: Path, records: Iterable[LocalizationRecord]) -> None:
    Path(path).write_bytes(write_localizations(records))

