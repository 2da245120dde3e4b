import itertools
import math
import random

import numpy as np
import pytest

from densecap.data import AnnotationRecord
from densecap.metrics import (Cider, EvalReport, bleu4, cider, dense_caption_scores, evaluate, localization_scores,
                              predictions_from_json, segment_iou, soda_c, soda_video)

CORPUS = ["a man chops the onions quickly", "then the chef washes the dishes slowly", "a girl rides a bike carefully"]

# Golden values frozen from nltk's sentence_bleu with a smoothing function that adds one
# only to zero higher-order counts (the rule implemented here), and from the numpy CIDEr
# oracle below. (candidate, reference index or None for all three, value)
BLEU_GOLDEN = [
    ("a man chops the onions slowly", 0, 0.759835685652),
    ("a man chops the onions slowly", None, 0.795270728767),
    ("the chef washes dishes", 1, 0.301815351550),
    ("the chef washes dishes", None, 0.387538582537),
    ("a boy rides a bike carefully today", 2, 0.434720871945),
    ("then the chef washes the dishes slowly", 0, 0.161499308196),
    ("girl bike", None, 0.080470840868),
]
CIDER_GOLDEN = [
    ("a man chops the onions slowly", 0, 7.456518982590),
    ("the chef washes dishes", 1, 3.930913929056),
    ("a boy rides a bike carefully today", 2, 4.974388059179),
    ("girl bike", 2, 1.658422430859),
]


@pytest.mark.parametrize("cand,ref,expected", BLEU_GOLDEN)
def test_bleu4_golden(cand, ref, expected):
    refs = CORPUS if ref is None else [CORPUS[ref]]
    assert bleu4(cand, refs) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("cand,ref,expected", CIDER_GOLDEN)
def test_cider_golden(cand, ref, expected):
    assert Cider(CORPUS).score(cand, [CORPUS[ref]]) == pytest.approx(expected, abs=1e-9)


def cider_oracle(cand, refs, docs):
    """Dense-vector CIDEr written independently of the package."""
    def grams(s, n):
        w = s.split()
        return [tuple(w[i:i + n]) for i in range(len(w) - n + 1)]

    per_n = []
    for n in range(1, 5):
        df = {}
        for d in docs:
            for g in {g for s in d for g in grams(s, n)}:
                df[g] = df.get(g, 0) + 1
        keys = sorted(set(df) | set(grams(cand, n)) | {g for r in refs for g in grams(r, n)})
        idx = {k: i for i, k in enumerate(keys)}
        idf = np.array([math.log(len(docs)) - math.log(max(1, df.get(k, 0))) for k in keys])

        def vec(s):
            v = np.zeros(len(keys))
            for g in grams(s, n):
                v[idx[g]] += 1
            return v * idf

        cv = vec(cand)
        sims = []
        for r in refs:
            rv = vec(r)
            den = np.linalg.norm(cv) * np.linalg.norm(rv)
            sims.append(cv @ rv / den if den > 0 else 0.0)
        per_n.append(np.mean(sims))
    return 10 * float(np.mean(per_n))


def test_cider_matches_oracle_on_random_sentences():
    rng = random.Random(0)
    words = "a the man girl chops washes rides bike dishes slowly quickly then".split()
    sents = [" ".join(rng.choice(words) for _ in range(rng.randint(2, 8))) for _ in range(12)]
    docs = [[s] for s in sents]
    scorer = Cider(sents)
    for i in range(12):
        cand = " ".join(rng.choice(words) for _ in range(rng.randint(1, 8)))
        refs = [sents[i], sents[(i + 1) % 12]]
        assert scorer.score(cand, refs) == pytest.approx(cider_oracle(cand, refs, docs), abs=1e-9)


def test_bleu_properties():
    assert bleu4("a man rides a bike", ["a man rides a bike"]) == 1.0
    cand, ref = "a man rides the bike now", "the bike a man rides again"
    unigram_precision = sum(min(cand.split().count(w), ref.split().count(w))
                            for w in set(cand.split())) / len(cand.split())
    score = bleu4(cand, [ref])
    assert 0 < score < unigram_precision
    assert bleu4("zebra", ["a man"]) == 0.0
    assert bleu4("", ["a man"]) == 0.0


def test_cider_corpus_helper():
    assert cider(["a man chops the onions slowly"], [[CORPUS[0]]], corpus=CORPUS) == pytest.approx(7.456518982590)
    assert cider([], []) == 0.0


def test_localization_examples():
    gts = {"v": [(0.1, 0.3), (0.5, 0.9)]}
    s = localization_scores(gts, gts)
    assert s["avg_recall"] == s["avg_precision"] == s["f1"] == 1.0
    s = localization_scores({"v": [(0.0, 0.5)]}, {"v": [(0.25, 0.75)]})
    assert s["recall"] == {0.3: 1.0, 0.5: 0.0, 0.7: 0.0, 0.9: 0.0} and s["avg_recall"] == 0.25
    s = localization_scores({}, gts)
    assert s["avg_recall"] == 0 and s["avg_precision"] == 0 and s["f1"] == 0


def _captioned(rng, n):
    words = "a the man girl chops washes rides bike".split()
    segs = sorted(tuple(sorted((rng.random(), rng.random()))) for _ in range(n))
    return [(s, " ".join(rng.choice(words) for _ in range(rng.randint(2, 5)))) for s in segs]


def test_dense_caption_scores_self_and_none():
    gts = {"v": [((0.0, 0.4), "a man rides a bike"), ((0.5, 1.0), "the girl washes dishes")]}
    assert dense_caption_scores(gts, gts, metric="bleu4") == pytest.approx(1.0)
    far = {"v": [((0.41, 0.49), "a man rides a bike")]}
    assert dense_caption_scores(far, gts, metric="bleu4") == 0.0


def test_dense_caption_scores_brute_force():
    rng = random.Random(5)
    for _ in range(10):
        preds = {v: _captioned(rng, rng.randint(0, 4)) for v in ("a", "b")}
        gts = {v: _captioned(rng, rng.randint(1, 4)) for v in ("a", "b")}
        mean, per = dense_caption_scores(preds, gts, metric="bleu4", per_threshold=True)
        for t in (0.3, 0.5, 0.7, 0.9):
            vals = []
            for v in preds:
                for ps, pc in preds[v]:
                    cands = [bleu4(pc, [gc]) for gs, gc in gts[v] if segment_iou(ps, gs) >= t]
                    vals.append(max(cands, default=0.0))
            assert per[t] == pytest.approx(sum(vals) / len(vals) if vals else 0.0, abs=1e-12)
        assert per[0.3] >= per[0.5] >= per[0.7] >= per[0.9]


def brute_force_alignment(score):
    n, m = len(score), len(score[0])
    best = 0.0
    for k in range(min(n, m) + 1):
        for rows in itertools.combinations(range(n), k):
            for cols in itertools.combinations(range(m), k):
                best = max(best, sum(score[r][c] for r, c in zip(rows, cols)))
    return best


def test_soda_dp_vs_brute_force():
    rng = random.Random(11)
    for _ in range(200):
        pred, gt = _captioned(rng, rng.randint(1, 5)), _captioned(rng, rng.randint(1, 5))
        fn = lambda c, r: bleu4(c, [r])  # noqa: E731
        score = [[segment_iou(p[0], g[0]) * fn(p[1], g[1]) for g in gt] for p in pred]
        total = brute_force_alignment(score)
        prec, rec = total / len(pred), total / len(gt)
        expected = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        assert soda_video(pred, gt, fn) == pytest.approx(expected, abs=1e-12)


def test_soda_examples():
    gts = {"v": [((0.0, 0.3), "a man rides a bike"), ((0.6, 1.0), "the girl washes dishes")]}
    assert soda_c(gts, gts, "bleu4") == pytest.approx(1.0)
    swapped = {"v": [((0.0, 0.3), "the girl washes dishes"), ((0.6, 1.0), "a man rides a bike")]}
    disjoint = {"v": [((0.31, 0.59), "a man rides a bike")]}
    assert soda_c(disjoint, gts, "bleu4") == 0.0
    assert soda_c(swapped, gts, "bleu4") < 0.5
    assert soda_c({}, gts) == 0.0
    assert soda_c(gts, [gts, disjoint], "bleu4") == pytest.approx(0.5)


def _record(vid, events, duration=10.0):
    return AnnotationRecord(vid, duration, events)


def test_evaluate_perfect_and_empty():
    anns = [_record("v1", [((0.0, 4.0), "a man rides a bike"), ((5.0, 9.0), "the girl washes the dishes")]),
            _record("v2", [((1.0, 3.0), "a boy reads a book")])]
    perfect = {"results": {r.video_id: [{"sentence": s, "timestamp": list(t)} for t, s in r.events] for r in anns}}
    rep = evaluate(perfect, anns)
    assert rep.f1 == rep.avg_recall == rep.avg_precision == 1.0
    assert rep.bleu4 == pytest.approx(1.0)
    assert rep.soda_c == pytest.approx(10.0)  # CIDEr self-score, so the story score is on CIDEr's x10 scale
    assert rep.paragraph_bleu4 == pytest.approx(1.0) and rep.meteor == "unavailable"
    empty = evaluate({}, anns)
    assert empty.f1 == empty.bleu4 == empty.cider == empty.soda_c == 0.0
    assert empty.num_predictions == 0 and empty.num_ground_truth == 3
    assert "METEOR unavailable" in rep.table()
    assert EvalReport.model_validate_json(rep.model_dump_json()) == rep


def test_evaluate_order_invariance():
    anns = [_record(f"v{i}", [((0.0, 4.0), "a man rides a bike"), ((5.0, 9.0), "a girl reads")]) for i in range(3)]
    preds = {f"v{i}": [{"sentence": "a man rides", "timestamp": [0.5, 4.5]}] for i in range(3)}
    a = evaluate(preds, anns)
    b = evaluate(dict(reversed(list(preds.items()))), list(reversed(anns)))
    assert a == b


def test_predictions_from_json_layouts():
    raw = {"v": [{"sentence": "x", "timestamp": [1, 2]}]}
    assert predictions_from_json(raw) == predictions_from_json({"results": raw}) == {"v": [((1.0, 2.0), "x")]}
