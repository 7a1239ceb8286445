"""Evaluation measures for video retrieval and step captioning."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .corpus import GoldStepSet, QrelEntry, StepCaption, tokenize
from .errors import ConfigError, DisjointEvaluation, NoRelevant
from .localization import temporal_iou
from .retrieval import RunEntry, group_by_query

logger = logging.getLogger(__name__)

METRIC_PROFILE = "medvidqa-kit-v1"
IOU_THRESHOLDS = (0.3, 0.5, 0.7)


@dataclass
class RetrievalReport:
    """Macro-averaged retrieval metrics."""

    map: float = 0.0
    r_at_5: float = 0.0
    r_at_10: float = 0.0
    p_at_5: float = 0.0
    p_at_10: float = 0.0
    ndcg: float = 0.0
    queries_evaluated: int = 0
    queries_skipped: int = 0
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    metric_profile: str = METRIC_PROFILE

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CaptionReport:
    """Step captioning metrics; f_score is 0 when precision + recall is 0."""

    precision: float = 0.0
    recall: float = 0.0
    f_score: float = 0.0
    iou_at_03: float = 0.0
    iou_at_05: float = 0.0
    iou_at_07: float = 0.0
    m_iou: float = 0.0
    keys_evaluated: int = 0
    metric_profile: str = METRIC_PROFILE

    def to_dict(self) -> dict:
        return asdict(self)


RETRIEVAL_FIELDS = (
    ('map', "MAP"),
    ('r_at_5', "R@5"),
    ('r_at_10', "R@10"),
    ('p_at_5', "P@5"),
    ('p_at_10', "P@10"),
    ('ndcg', "nDCG"),
)
CAPTION_FIELDS = (
    ('precision', "Precision"),
    ('recall', "Recall"),
    ('f_score', "F-Score"),
    ('iou_at_03', "IoU@0.3"),
    ('iou_at_05', "IoU@0.5"),
    ('iou_at_07', "IoU@0.7"),
    ('m_iou', "mIoU"),
)


def _dedupe(ranked: Sequence[str]) -> list[str]:
    seen = set()
    out = []
    for vid in ranked:
        if vid not in seen:
            seen.add(vid)
            out.append(vid)
    return out


def _require_relevant(relevant: set[str]) -> None:
    if not relevant:
        raise NoRelevant("Query has no relevant documents")


def average_precision(ranked: Sequence[str], relevant: set[str]) -> float:
    """Sum of precision at each relevant hit, divided by the number of relevant documents."""
    _require_relevant(relevant)
    hits = 0
    total = 0.0
    for i, vid in enumerate(_dedupe(ranked), start=1):
        if vid in relevant:
            hits += 1
            total += hits / i
    return total / len(relevant)


def precision_at_k(ranked: Sequence[str], relevant: set[str], k: int) -> float:
    """Hits in the top k divided by k, even when fewer than k documents were retrieved."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    return sum(1 for vid in _dedupe(ranked)[:k] if vid in relevant) / k


def recall_at_k(ranked: Sequence[str], relevant: set[str], k: int) -> float:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    _require_relevant(relevant)
    return sum(1 for vid in _dedupe(ranked)[:k] if vid in relevant) / len(relevant)


def ndcg(ranked: Sequence[str], relevant: set[str], cutoff: int | None = None) -> float:
    """Binary-gain nDCG over the whole run, or its top ``cutoff`` ranks."""
    _require_relevant(relevant)
    if cutoff is not None and cutoff < 1:
        raise ConfigError(f"nDCG cutoff must be >= 1, got {cutoff}")
    docs = _dedupe(ranked)
    if cutoff is not None:
        docs = docs[:cutoff]
    dcg = math.fsum(1.0 / math.log2(i + 1) for i, vid in enumerate(docs, start=1) if vid in relevant)
    ideal_count = len(relevant) if cutoff is None else min(len(relevant), cutoff)
    idcg = math.fsum(1.0 / math.log2(i + 1) for i in range(1, ideal_count + 1))
    return dcg / idcg


def _query_metrics(ranked: Sequence[str], relevant: set[str], ndcg_cutoff: int | None) -> dict[str, float]:
    return {
        'map': average_precision(ranked, relevant),
        'r_at_5': recall_at_k(ranked, relevant, 5),
        'r_at_10': recall_at_k(ranked, relevant, 10),
        'p_at_5': precision_at_k(ranked, relevant, 5),
        'p_at_10': precision_at_k(ranked, relevant, 10),
        'ndcg': ndcg(ranked, relevant, ndcg_cutoff),
    }


def evaluate_retrieval(run: Sequence[RunEntry], qrels: Iterable[QrelEntry],
                       ndcg_cutoff: int | None = None) -> RetrievalReport:
    """Macro-average the retrieval metrics over judged queries.

    Queries whose judgments hold no relevant video are skipped. Judged queries
    missing from the run score 0 on every metric.

    Raises:
        DisjointEvaluation: If the run and the qrels share no query
    """
    ranked_by_query = {qid: [e.video_id for e in entries] for qid, entries in group_by_query(run).items()}
    relevant_by_query: dict[str, set[str]] = {}
    for entry in qrels:
        rel = relevant_by_query.setdefault(entry.query_id, set())
        if entry.relevance > 0:
            rel.add(entry.video_id)

    if not set(ranked_by_query) & set(relevant_by_query):
        raise DisjointEvaluation("Run and qrels share no query")

    report = RetrievalReport()
    for qid in sorted(relevant_by_query):
        relevant = relevant_by_query[qid]
        if not relevant:
            logger.info("Query %s has no relevant judgments; skipped", qid)
            report.queries_skipped += 1
            continue
        if qid not in ranked_by_query:
            logger.warning("Judged query %s is missing from the run; scored 0", qid)
        report.per_query[qid] = _query_metrics(ranked_by_query.get(qid, []), relevant, ndcg_cutoff)

    report.queries_evaluated = len(report.per_query)
    if report.queries_evaluated:
        for name, _ in RETRIEVAL_FIELDS:
            values = [report.per_query[qid][name] for qid in sorted(report.per_query)]
            setattr(report, name, math.fsum(values) / len(values))
    return report


def match_steps(pred: Sequence[StepCaption], gold: Sequence[StepCaption]) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching by descending temporal IoU.

    Ties go to the gold step that starts earlier; zero-overlap pairs never match.

    Returns:
        (pred_idx, gold_idx, iou) triples ordered by gold index
    """
    candidates = []
    for pi, p in enumerate(pred):
        for gi, g in enumerate(gold):
            iou = temporal_iou(p.span, g.span)
            if iou > 0:
                candidates.append((-iou, g.start_s, gi, pi))
    candidates.sort()

    used_pred: set[int] = set()
    used_gold: set[int] = set()
    matches = []
    for neg_iou, _, gi, pi in candidates:
        if pi in used_pred or gi in used_gold:
            continue
        used_pred.add(pi)
        used_gold.add(gi)
        matches.append((pi, gi, -neg_iou))
    return sorted(matches, key=lambda m: m[1])


def token_f1(pred_text: str, gold_text: str) -> tuple[float, float, float]:
    """Token-multiset precision, recall and F1 (0 when nothing overlaps)."""
    pred_tokens, gold_tokens = Counter(tokenize(pred_text)), Counter(tokenize(gold_text))
    overlap = sum((pred_tokens & gold_tokens).values())
    p = overlap / sum(pred_tokens.values()) if pred_tokens else 0.0
    r = overlap / sum(gold_tokens.values()) if gold_tokens else 0.0
    return p, r, _harmonic(p, r)


def _harmonic(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def evaluate_steps(pred_sets: Iterable[GoldStepSet], gold_sets: Iterable[GoldStepSet]) -> CaptionReport:
    """Score predicted step sets against gold ones keyed by (query_id, video_id).

    Every gold key is evaluated; a key without predictions counts as an empty
    prediction. Text precision and recall are micro-averaged over all steps,
    the IoU measures are averaged over keys.

    Raises:
        DisjointEvaluation: If no key is shared
    """
    preds = {s.key: s.steps for s in pred_sets}
    golds = {s.key: s.steps for s in gold_sets}
    if not set(preds) & set(golds):
        raise DisjointEvaluation("Predicted and gold step sets share no (query, video) key")

    precision_sum: list[float] = []
    recall_sum: list[float] = []
    total_pred = total_gold = 0
    per_key: dict[str, list[float]] = {name: [] for name in ('iou_at_03', 'iou_at_05', 'iou_at_07', 'm_iou')}

    report = CaptionReport()
    for key in sorted(golds):
        gold = golds[key]
        if not gold:
            logger.warning("Gold step set %s is empty; skipped", key)
            continue
        pred = preds.get(key, ())
        total_pred += len(pred)
        total_gold += len(gold)
        matches = match_steps(pred, gold)
        for pi, gi, _ in matches:
            p, r, _ = token_f1(pred[pi].text, gold[gi].text)
            precision_sum.append(p)
            recall_sum.append(r)
        ious = [iou for _, _, iou in matches]
        for name, t in zip(('iou_at_03', 'iou_at_05', 'iou_at_07'), IOU_THRESHOLDS):
            per_key[name].append(sum(1 for iou in ious if iou >= t) / len(gold))
        per_key['m_iou'].append(math.fsum(ious) / len(gold))
        report.keys_evaluated += 1

    if not report.keys_evaluated:
        return report
    report.precision = math.fsum(precision_sum) / total_pred if total_pred else 0.0
    report.recall = math.fsum(recall_sum) / total_gold
    report.f_score = _harmonic(report.precision, report.recall)
    for name, values in per_key.items():
        setattr(report, name, math.fsum(values) / len(values))
    return report


def _format_table(title: str, report, fields: Sequence[tuple[str, str]], counts: str) -> str:
    lines = [
        f"{title} (metric-profile: {report.metric_profile})",
        counts,
        f"  {'Metric':<10} {'Value':>10} {'x100':>10}",
    ]
    for name, label in fields:
        value = getattr(report, name)
        lines.append(f"  {label:<10} {value:>10.6f} {value * 100:>10.4f}")
    return "\n".join(lines)


def format_retrieval_report(report: RetrievalReport) -> str:
    counts = f"Queries evaluated: {report.queries_evaluated} (skipped: {report.queries_skipped})"
    return _format_table("Retrieval evaluation", report, RETRIEVAL_FIELDS, counts)


def format_caption_report(report: CaptionReport) -> str:
    counts = f"Keys evaluated: {report.keys_evaluated}"
    return _format_table("Step captioning evaluation", report, CAPTION_FIELDS, counts)
