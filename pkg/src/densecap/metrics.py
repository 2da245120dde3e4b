"""Evaluation: localization recall/precision/F1, IOU-thresholded caption scores
(BLEU4, CIDEr), an order-preserving story score and paragraph-level scores.

METEOR is not computed; reports mark it unavailable.
"""
from __future__ import annotations

import math
from collections import Counter
from typing import Callable, Iterable, Mapping, Sequence

from pydantic import BaseModel

from .text import normalize

THRESHOLDS = (0.3, 0.5, 0.7, 0.9)

Segment = tuple[float, float]
Tokens = Sequence[str]


def _tokens(x) -> list[str]:
    return normalize(x) if isinstance(x, str) else list(x)


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _as_refs(references, sentences: bool) -> list:
    """One reference or many: a string, a token list, or a list of either."""
    if isinstance(references, str):
        return [references]
    references = list(references)
    if not sentences and references and all(isinstance(r, str) for r in references):
        return [references]
    return references


def bleu4(candidate, references) -> float:
    """Sentence BLEU-4 with +1 smoothing of zero higher-order matches.

    ``references`` is one sentence or a list of sentences (strings or token lists).
    """
    refs = [_tokens(r) for r in _as_refs(references, isinstance(candidate, str))]
    cand = _tokens(candidate)
    if not cand or not refs:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        c = _ngrams(cand, n)
        max_ref = Counter()
        for r in refs:
            for g, k in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], k)
        matches = sum(min(k, max_ref[g]) for g, k in c.items())
        total = max(len(cand) - n + 1, 1)  # no n-grams of this order: count the order as one miss
        if n == 1:
            if matches == 0:
                return 0.0
            p = matches / total
        elif matches == 0:
            p = 1.0 / (total + 1)
        else:
            p = matches / total
        log_p += math.log(p) / 4
    c_len = len(cand)
    r_len = min((abs(len(r) - c_len), len(r)) for r in refs)[1]
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


class Cider:
    """CIDEr: mean over n = 1..4 of the cosine similarity of TF-IDF n-gram vectors, times 10.

    Document frequencies come from ``corpus``: a list of documents, each a list
    of reference sentences.
    """

    def __init__(self, corpus: Iterable, n: int = 4):
        self.n = n
        docs = [[_tokens(s) for s in ([d] if isinstance(d, str) else d)] for d in corpus]
        self.df: Counter = Counter()
        for doc in docs:
            grams = set()
            for sent in doc:
                for k in range(1, n + 1):
                    grams.update(_ngrams(sent, k))
            self.df.update(grams)
        self.log_docs = math.log(max(len(docs), 1))

    def _vec(self, tokens):
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            v = {g: c * (self.log_docs - math.log(max(1.0, self.df[g]))) for g, c in _ngrams(tokens, k).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def score(self, candidate, references) -> float:
        cand = _tokens(candidate)
        references = _as_refs(references, isinstance(candidate, str))
        if not cand or not references:
            return 0.0
        cv, cn = self._vec(cand)
        total = 0.0
        for ref in references:
            rv, rn = self._vec(_tokens(ref))
            sims = []
            for k in range(self.n):
                dot = sum(x * rv[k].get(g, 0.0) for g, x in cv[k].items())
                sims.append(dot / (cn[k] * rn[k]) if cn[k] and rn[k] else 0.0)
            total += sum(sims) / self.n
        return 10.0 * total / len(references)


def cider(candidates, references, corpus=None) -> float:
    """Mean CIDEr of parallel candidate / reference-list pairs; ``corpus`` defaults to ``references``."""
    scorer = Cider(references if corpus is None else corpus)
    if not candidates:
        return 0.0
    return sum(scorer.score(c, r) for c, r in zip(candidates, references)) / len(candidates)


# ---------------------------------------------------------------------------
# corpus-level scores over {video_id: [...]} mappings


def segment_iou(a: Segment, b: Segment) -> float:
    """IOU of two (start, end) pairs in any common unit."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0:
        return 1.0 if tuple(a) == tuple(b) else 0.0
    return inter / union


def localization_scores(preds: Mapping[str, Sequence[Segment]], gts: Mapping[str, Sequence[Segment]],
                        thresholds: Sequence[float] = THRESHOLDS) -> dict:
    """Corpus-aggregated recall / precision per threshold, their averages and F1."""
    videos = sorted(set(preds) | set(gts))
    recall, precision = {}, {}
    for t in thresholds:
        recalled = total_gt = precise = total_pred = 0
        for v in videos:
            p, g = list(preds.get(v, [])), list(gts.get(v, []))
            total_gt += len(g)
            total_pred += len(p)
            recalled += sum(any(segment_iou(x, y) >= t for x in p) for y in g)
            precise += sum(any(segment_iou(x, y) >= t for y in g) for x in p)
        recall[t] = recalled / total_gt if total_gt else 0.0
        precision[t] = precise / total_pred if total_pred else 0.0
    avg_r = sum(recall.values()) / len(thresholds)
    avg_p = sum(precision.values()) / len(thresholds)
    f1 = 2 * avg_r * avg_p / (avg_r + avg_p) if avg_r + avg_p > 0 else 0.0
    return {"recall": recall, "precision": precision, "avg_recall": avg_r, "avg_precision": avg_p, "f1": f1}


CaptionedSegments = Mapping[str, Sequence[tuple[Segment, str]]]


def _metric_fn(metric: str | Callable, gts: CaptionedSegments) -> Callable[[str, str], float]:
    if callable(metric):
        return metric
    if metric == "bleu4":
        return lambda c, r: bleu4(c, [r])
    if metric == "cider":
        scorer = Cider([s for v in gts.values() for _, s in v])
        return lambda c, r: scorer.score(c, [r])
    raise ValueError(f"unknown caption metric {metric!r}")


def dense_caption_scores(preds: CaptionedSegments, gts: CaptionedSegments,
                         thresholds: Sequence[float] = THRESHOLDS, metric: str | Callable = "bleu4",
                         per_threshold: bool = False):
    """Mean over thresholds of the per-prediction caption score.

    At each threshold a prediction scores its best caption metric among the
    ground-truth events it overlaps with IOU >= threshold, or 0 if none; the
    threshold score is the mean over all predictions in the corpus.
    """
    fn = _metric_fn(metric, gts)
    pair_cache: dict = {}
    scores = {}
    for t in thresholds:
        total, count = 0.0, 0
        for v in sorted(preds):
            g = list(gts.get(v, []))
            for pi, (pseg, psent) in enumerate(preds[v]):
                count += 1
                best = 0.0
                for gi, (gseg, gsent) in enumerate(g):
                    if segment_iou(pseg, gseg) >= t:
                        key = (v, pi, gi)
                        if key not in pair_cache:
                            pair_cache[key] = fn(psent, gsent)
                        best = max(best, pair_cache[key])
                total += best
        scores[t] = total / count if count else 0.0
    mean = sum(scores.values()) / len(thresholds)
    return (mean, scores) if per_threshold else mean


def _align(score) -> float:
    """Maximum-total monotone one-to-one alignment of two ordered sequences."""
    n = len(score)
    m = len(score[0]) if n else 0
    S = [[0.0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            S[i][j] = max(S[i - 1][j], S[i][j - 1], S[i - 1][j - 1] + score[i - 1][j - 1])
    return S[n][m]


def soda_video(pred: Sequence[tuple[Segment, str]], gt: Sequence[tuple[Segment, str]],
               fn: Callable[[str, str], float]) -> float:
    pred = sorted(pred, key=lambda x: (x[0][0], x[0][1]))
    gt = sorted(gt, key=lambda x: (x[0][0], x[0][1]))
    if not pred or not gt:
        return 0.0
    score = [[segment_iou(p[0], g[0]) * fn(p[1], g[1]) for g in gt] for p in pred]
    total = _align(score)
    prec, rec = total / len(pred), total / len(gt)
    return 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0


def soda_c(preds: CaptionedSegments, gts: CaptionedSegments | Sequence[CaptionedSegments],
           metric: str | Callable = "cider") -> float:
    """Story-level F-score from the best order-preserving alignment per video
    (pair score = IOU x caption metric). Several annotation sets are scored
    independently and averaged."""
    gt_sets = [gts] if isinstance(gts, Mapping) else list(gts)
    results = []
    for gset in gt_sets:
        fn = _metric_fn(metric, gset)
        videos = sorted(gset)
        if not videos:
            results.append(0.0)
            continue
        results.append(sum(soda_video(preds.get(v, []), gset[v], fn) for v in videos) / len(videos))
    return sum(results) / len(results)


def paragraph_scores(preds: CaptionedSegments, gts: CaptionedSegments) -> dict:
    """BLEU4 / CIDEr of time-ordered caption paragraphs, averaged over videos."""
    videos = sorted(gts)

    def paragraph(items):
        return " ".join(s for _, s in sorted(items, key=lambda x: (x[0][0], x[0][1])))

    gt_par = {v: paragraph(gts[v]) for v in videos}
    pred_par = {v: paragraph(preds.get(v, [])) for v in videos}
    if not videos:
        return {"bleu4": 0.0, "cider": 0.0}
    scorer = Cider(list(gt_par.values()))
    return {"bleu4": sum(bleu4(pred_par[v], [gt_par[v]]) for v in videos) / len(videos),
            "cider": sum(scorer.score(pred_par[v], [gt_par[v]]) for v in videos) / len(videos)}


class EvalReport(BaseModel):
    thresholds: list[float]
    recall: dict[str, float]
    precision: dict[str, float]
    avg_recall: float
    avg_precision: float
    f1: float
    bleu4: float
    cider: float
    meteor: str = "unavailable"
    soda_c: float
    paragraph_bleu4: float
    paragraph_cider: float
    num_videos: int
    num_predictions: int
    num_ground_truth: int

    def table(self) -> str:
        rows = [("IOU", "recall", "precision")]
        rows += [(k, f"{self.recall[k]:.4f}", f"{self.precision[k]:.4f}") for k in self.recall]
        lines = [f"{a:>8} {b:>10} {c:>10}" for a, b, c in rows]
        lines += [
            f"avg recall {self.avg_recall:.4f}  avg precision {self.avg_precision:.4f}  F1 {self.f1:.4f}",
            f"BLEU4 {self.bleu4:.4f}  CIDEr {self.cider:.4f}  METEOR {self.meteor}  SODA_c {self.soda_c:.4f}",
            f"paragraph BLEU4 {self.paragraph_bleu4:.4f}  paragraph CIDEr {self.paragraph_cider:.4f}",
            f"videos {self.num_videos}  predictions {self.num_predictions}  ground truth {self.num_ground_truth}",
        ]
        return "\n".join(lines)


def predictions_from_json(data: Mapping) -> dict[str, list[tuple[Segment, str]]]:
    """Accepts ``{video_id: [...]}`` or the wrapped ``{"results": {...}}`` layout."""
    if "results" in data and isinstance(data["results"], Mapping):
        data = data["results"]
    out = {}
    for vid, items in data.items():
        out[vid] = [((float(it["timestamp"][0]), float(it["timestamp"][1])), str(it["sentence"])) for it in items]
    return out


def evaluate(predictions: Mapping, annotations, thresholds: Sequence[float] = THRESHOLDS) -> EvalReport:
    """Score a prediction JSON mapping against annotation records (or several
    annotation sets, used independently for the story score)."""
    ann_sets = annotations if annotations and isinstance(annotations[0], (list, tuple)) else [annotations]
    gts = {r.video_id: list(zip(r.timestamps, r.sentences)) for r in ann_sets[0]}
    preds = predictions_from_json(predictions)
    preds = {v: preds.get(v, []) for v in gts}  # only annotated videos are scored
    loc = localization_scores({v: [s for s, _ in p] for v, p in preds.items()},
                              {v: [s for s, _ in g] for v, g in gts.items()}, thresholds)
    par = paragraph_scores(preds, gts)
    soda_sets = [{r.video_id: list(zip(r.timestamps, r.sentences)) for r in s} for s in ann_sets]
    return EvalReport(
        thresholds=list(thresholds),
        recall={str(t): v for t, v in loc["recall"].items()},
        precision={str(t): v for t, v in loc["precision"].items()},
        avg_recall=loc["avg_recall"], avg_precision=loc["avg_precision"], f1=loc["f1"],
        bleu4=dense_caption_scores(preds, gts, thresholds, "bleu4"),
        cider=dense_caption_scores(preds, gts, thresholds, "cider"),
        soda_c=soda_c(preds, soda_sets, "cider"),
        paragraph_bleu4=par["bleu4"], paragraph_cider=par["cider"],
        num_videos=len(gts), num_predictions=sum(len(p) for p in preds.values()),
        num_ground_truth=sum(len(g) for g in gts.values()),
    )
