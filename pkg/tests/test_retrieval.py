"""Tests for similarity scoring, fusion, ranking and run files."""

import math
import random

import numpy as np
import pytest

from medvidqa_kit.clients import EmbeddingClient, EmbeddingVector, ExpandedAnswer, ServiceConfig
from medvidqa_kit.corpus import Corpus, MedicalQuestion, TranscriptSegment, VideoRecord
from medvidqa_kit.errors import ConfigError, DimMismatch, NoChunks, NoFrames, ParseError, RunFormatError, ZeroVector
from medvidqa_kit.features import FrameFeatures, write_frame_features
from medvidqa_kit.retrieval import (
    RunEntry,
    StrategyConfig,
    chunk_tokens,
    cosine,
    fuse_runs,
    group_by_query,
    rank_videos,
    read_run,
    resolve_strategy,
    retrieve,
    score_query_video,
    sim_final,
    text_to_vision_score,
    write_run,
)


def _vec(*values) -> EmbeddingVector:
    return EmbeddingVector.from_values("m", values)


def _unit(angle: float) -> EmbeddingVector:
    return _vec(math.cos(angle), math.sin(angle))


def _video(video_id, *texts, features=None):
    segments = tuple(TranscriptSegment(i, i - 1.0, float(i), t) for i, t in enumerate(texts, start=1))
    return VideoRecord(video_id, float(len(texts)), segments, frame_features_path=features)


def _stub_embedder(tmp_path) -> EmbeddingClient:
    return EmbeddingClient(ServiceConfig(backend='stub', cache_dir=tmp_path / "cache"))


class TestCosine:

    def test_fixture(self):
        assert cosine(_vec(1, 0), _vec(1, 1)) == pytest.approx(0.70710678, abs=1e-8)

    def test_accepts_plain_sequences(self):
        assert cosine([0, 2], np.array([0.0, 5.0])) == pytest.approx(1.0)

    def test_bounds(self):
        rng = random.Random(1)
        for _ in range(200):
            u = [rng.uniform(-1, 1) for _ in range(5)]
            v = [rng.uniform(-1, 1) for _ in range(5)]
            assert -1.0 <= cosine(u, v) <= 1.0
        assert cosine([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
        assert cosine([1, 2, 3], [-1, -2, -3]) == pytest.approx(-1.0)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            cosine(_vec(1, 0), _vec(1, 0, 0))

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            cosine([0, 0], [1, 0])


class TestScoreQueryVideo:

    @staticmethod
    def _embs():
        # encoder e1 chunk sims 0.2 and 0.6, encoder e2 chunk sims 0.5 and 0.4
        q = {'e1': _unit(0.0), 'e2': _unit(0.0)}
        chunks = {
            'e1': [_unit(math.acos(0.2)), _unit(math.acos(0.6))],
            'e2': [_unit(math.acos(0.5)), _unit(math.acos(0.4))],
        }
        return q, chunks

    def test_max(self):
        q, chunks = self._embs()
        assert score_query_video(q, chunks, 'max') == pytest.approx(0.6)

    def test_mean(self):
        q, chunks = self._embs()
        assert score_query_video(q, chunks, 'mean') == pytest.approx(0.55)

    def test_no_chunks(self):
        with pytest.raises(NoChunks):
            score_query_video({'e1': _unit(0.0)}, {'e1': []})

    def test_mean_never_exceeds_max(self):
        rng = random.Random(4)
        for _ in range(300):
            encoders = [f"e{i}" for i in range(rng.randint(1, 3))]
            q = {e: _unit(rng.uniform(0, math.pi)) for e in encoders}
            chunks = {e: [_unit(rng.uniform(0, math.pi)) for _ in range(rng.randint(1, 4))] for e in encoders}
            assert score_query_video(q, chunks, 'mean') <= score_query_video(q, chunks, 'max') + 1e-12


class TestSimFinal:

    def test_max_semantics(self):
        rng = random.Random(1000)
        for _ in range(1000):
            a, b = rng.uniform(-1, 1), rng.uniform(-1, 1)
            result = sim_final(a, b)
            assert result >= a and result >= b
            assert result in (a, b)

    def test_absent_expansion(self):
        assert sim_final(0.3) == 0.3


class TestChunking:

    def test_windows(self):
        tokens = [str(i) for i in range(10)]
        assert chunk_tokens(tokens, 4, 3) == ["0 1 2 3", "3 4 5 6", "6 7 8 9"]

    def test_last_window_reaches_end(self):
        tokens = [str(i) for i in range(5)]
        assert chunk_tokens(tokens, 4, 2) == ["0 1 2 3", "2 3 4"]

    def test_short_input_is_one_chunk(self):
        assert chunk_tokens(["wash", "hands"], 256, 128) == ["wash hands"]

    def test_empty(self):
        assert chunk_tokens([], 4, 2) == []


class TestTextToVision:

    def test_max_over_frames(self):
        frames = FrameFeatures(np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))
        assert text_to_vision_score(_vec(1, 0), frames) == pytest.approx(1.0)
        assert text_to_vision_score(_vec(-1, 0), frames) == pytest.approx(0.0)

    def test_no_frames(self):
        with pytest.raises(NoFrames):
            text_to_vision_score(_vec(1, 0), np.zeros((0, 2)))

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            text_to_vision_score(_vec(1, 0, 0), np.ones((2, 2)))


class TestRanking:

    def test_ties_by_video_id(self):
        entries = rank_videos({'v3': 0.5, 'v1': 0.5, 'v2': 0.9}, k=10, query_id="q1", run_tag="t")
        assert [(e.video_id, e.rank) for e in entries] == [("v2", 1), ("v1", 2), ("v3", 3)]

    def test_rounding_noise_does_not_break_ties(self):
        entries = rank_videos({'v3': 0.1 + 0.2, 'v1': 0.3}, k=10)
        assert [e.video_id for e in entries] == ["v1", "v3"]
        assert entries[0].score == entries[1].score == 0.3

    def test_cutoff(self):
        assert len(rank_videos({f"v{i}": i for i in range(20)}, k=5)) == 5

    def test_invalid_k(self):
        with pytest.raises(ConfigError):
            rank_videos({'v1': 1.0}, k=0)


class TestFusion:

    def test_rrf_fixture(self):
        a = [RunEntry("q1", "v1", 1, 0.9, "a")]
        b = [RunEntry("q1", "v2", 1, 0.8, "b"), RunEntry("q1", "v1", 2, 0.7, "b")]
        fused = fuse_runs(a, b, rrf_k=60)
        assert fused[0].video_id == "v1"
        assert fused[0].score == pytest.approx(1 / 61 + 1 / 62, abs=1e-8)
        assert fused[0].score == pytest.approx(0.03252226, abs=1e-8)

    def test_query_in_one_run_only(self):
        a = [RunEntry("q2", "v4", 1, 0.9, "a")]
        fused = fuse_runs(a, [], rrf_k=60)
        assert [(e.query_id, e.video_id, e.rank) for e in fused] == [("q2", "v4", 1)]

    def test_symmetry(self):
        rng = random.Random(3)
        for _ in range(100):
            runs = []
            for _ in range(2):
                run = []
                for qid in rng.sample(["q1", "q2", "q3"], rng.randint(1, 3)):
                    vids = rng.sample([f"v{i}" for i in range(8)], rng.randint(1, 8))
                    run.extend(RunEntry(qid, v, r, 1.0 / r, "x") for r, v in enumerate(vids, start=1))
                runs.append(run)
            assert fuse_runs(runs[0], runs[1], 60, k=5) == fuse_runs(runs[1], runs[0], 60, k=5)

    def test_invalid_rrf_k(self):
        with pytest.raises(ConfigError):
            fuse_runs([], [], rrf_k=0)


class TestRunFiles:

    def test_format(self):
        entries = [RunEntry("q1", "v2", 1, 0.91234567, "run1_orig_max"), RunEntry("q1", "v1", 2, 0.5, "run1_orig_max")]
        assert write_run(entries) == (
            b"q1 Q0 v2 1 0.912346 run1_orig_max\n"
            b"q1 Q0 v1 2 0.500000 run1_orig_max\n"
        )

    def test_read_back(self):
        entries = [RunEntry("q1", "v2", 1, 0.5, "t"), RunEntry("q2", "v1", 1, 0.25, "t")]
        assert read_run(write_run(entries)) == entries

    def test_ranks_must_be_contiguous(self):
        with pytest.raises(RunFormatError, match="contiguous"):
            write_run([RunEntry("q1", "v1", 2, 0.5, "t")])

    def test_scores_must_not_increase(self):
        with pytest.raises(RunFormatError, match="increases"):
            write_run([RunEntry("q1", "v1", 1, 0.1, "t"), RunEntry("q1", "v2", 2, 0.5, "t")])

    def test_parse_error_names_line(self):
        with pytest.raises(ParseError) as excinfo:
            read_run("q1 Q0 v1 1 0.5 t\nq1 Q0 v2 two 0.4 t\n", path="run.txt")
        assert excinfo.value.line_no == 2
        assert "run.txt:2" in str(excinfo.value)

    def test_non_utf8_run(self):
        with pytest.raises(RunFormatError, match="run.txt: not valid UTF-8"):
            read_run(b"q1 Q0 v\xff1 1 0.5 t\n", path="run.txt")

    def test_group_by_query(self):
        entries = [RunEntry("q2", "v1", 2, 0.1, "t"), RunEntry("q1", "v1", 1, 0.3, "t"), RunEntry("q2", "v2", 1, 0.2, "t")]
        grouped = group_by_query(entries)
        assert list(grouped) == ["q2", "q1"]
        assert [e.video_id for e in grouped["q2"]] == ["v2", "v1"]


class TestStrategyConfig:

    def test_aliases(self):
        assert resolve_strategy("run4") == "run4_orig_mean"
        assert StrategyConfig(strategy="run3").run_tag == "run3_fused"

    @pytest.mark.parametrize("kwargs", [
        {'strategy': 'run9'},
        {'k': 0},
        {'encoders': []},
        {'chunk_tokens': 4, 'chunk_stride': 8},
        {'rrf_k': 0},
        {'expansion_mode': 'sum'},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            StrategyConfig(**kwargs)


class TestRetrieve:
    """Strategies over a small corpus with stub embeddings."""

    CORPUS = Corpus((
        _video("v1", "wet your hands", "scrub with soap", "rinse and dry"),
        _video("v2", "place a sterile pad", "wrap the bandage"),
        _video("v3", "knead the dough", "bake the bread"),
    ))
    QUESTIONS = [MedicalQuestion("q1", "how to wash hands with soap"), MedicalQuestion("q2", "apply a bandage")]

    def test_run1_ranks_every_video(self, tmp_path):
        config = StrategyConfig(strategy="run1", encoders=["stub-64", "stub-128"], k=10)
        run = retrieve(self.CORPUS, self.QUESTIONS, [], config, _stub_embedder(tmp_path))
        grouped = group_by_query(run)
        assert list(grouped) == ["q1", "q2"]
        assert grouped["q1"][0].video_id == "v1"
        assert grouped["q2"][0].video_id == "v2"
        assert all(e.run_tag == "run1_orig_max" for e in run)

    def test_run4_scores_are_bounded_by_run1(self, tmp_path):
        embedder = _stub_embedder(tmp_path)
        scores = {}
        for strategy in ("run1", "run4"):
            config = StrategyConfig(strategy=strategy, encoders=["stub-64", "stub-128"], k=10)
            run = retrieve(self.CORPUS, self.QUESTIONS, [], config, embedder)
            scores[strategy] = {(e.query_id, e.video_id): e.score for e in run}
        for key, score in scores["run4"].items():
            assert score <= scores["run1"][key] + 1e-12

    def test_run2_falls_back_to_original(self, tmp_path):
        embedder = _stub_embedder(tmp_path)
        run1 = retrieve(self.CORPUS, self.QUESTIONS, [], StrategyConfig(strategy="run1"), embedder)
        expansions = [
            ExpandedAnswer("q1", "wet your hands then scrub with soap then rinse", "m"),
            ExpandedAnswer("q2", "", "m", fallback=True),
        ]
        run2 = retrieve(self.CORPUS, self.QUESTIONS, expansions, StrategyConfig(strategy="run2"), embedder)
        original_q2 = [(e.video_id, e.score) for e in run1 if e.query_id == "q2"]
        assert [(e.video_id, e.score) for e in run2 if e.query_id == "q2"] == original_q2
        assert group_by_query(run2)["q1"][0].video_id == "v1"

    def test_run2_max_with_original_dominates_run1(self, tmp_path):
        embedder = _stub_embedder(tmp_path)
        expansions = [ExpandedAnswer("q1", "bake bread", "m"), ExpandedAnswer("q2", "sterile pad", "m")]
        run1 = retrieve(self.CORPUS, self.QUESTIONS, [], StrategyConfig(strategy="run1"), embedder)
        config = StrategyConfig(strategy="run2", expansion_mode="max_with_original")
        run2 = retrieve(self.CORPUS, self.QUESTIONS, expansions, config, embedder)
        before = {(e.query_id, e.video_id): e.score for e in run1}
        for e in run2:
            assert e.score >= before[(e.query_id, e.video_id)]

    def test_run3_follows_topic_order(self, tmp_path):
        questions = list(reversed(self.QUESTIONS))
        expansions = [ExpandedAnswer("q1", "wash hands", "m"), ExpandedAnswer("q2", "bandage", "m")]
        run = retrieve(self.CORPUS, questions, expansions, StrategyConfig(strategy="run3", k=2), _stub_embedder(tmp_path))
        assert [e.query_id for e in run] == ["q2", "q2", "q1", "q1"]
        assert all(e.run_tag == "run3_fused" for e in run)

    def test_run5_skips_videos_without_features(self, tmp_path):
        features = tmp_path / "v1.feat"
        write_frame_features(features, np.array([[1.0] * 8, [0.5, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]]))
        corpus = Corpus((
            _video("v1", "wet your hands", features=features),
            _video("v2", "wrap the bandage"),
        ))
        run = retrieve(corpus, self.QUESTIONS, [], StrategyConfig(strategy="run5"), _stub_embedder(tmp_path))
        assert {e.video_id for e in run} == {"v1"}

    def test_worker_count_does_not_change_output(self, tmp_path):
        config = StrategyConfig(strategy="run4", encoders=["stub-32", "stub-64"])
        single = retrieve(self.CORPUS, self.QUESTIONS, [], config, _stub_embedder(tmp_path / "a"), workers=1)
        many = retrieve(self.CORPUS, self.QUESTIONS, [], config, _stub_embedder(tmp_path / "b"), workers=4)
        assert write_run(single) == write_run(many)

    def test_no_questions(self, tmp_path):
        assert retrieve(self.CORPUS, [], [], StrategyConfig(), _stub_embedder(tmp_path)) == []
