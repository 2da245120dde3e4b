import filecmp
import json

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from densecap.config import SynthConfig
from densecap.data import AnnotationError, AnnotationRecord, Corpus, load_annotations, write_annotations
from densecap.features import read_feature_file
from densecap.synth import InfeasibleConfigError, check_feasible, generate_corpus
from densecap.text import EOS, UNK, Vocabulary, tokenize


def _small(**kw):
    base = dict(n_videos=20, holdout=5)
    base.update(kw)
    return SynthConfig(**base)


def test_generation_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_corpus(a, _small(), seed=3)
    generate_corpus(b, _small(), seed=3)
    cmp = filecmp.dircmp(a, b)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert not filecmp.dircmp(a / "features", b / "features").diff_files
    generate_corpus(tmp_path / "c", _small(), seed=4)
    assert (a / "annotations.json").read_bytes() != (tmp_path / "c" / "annotations.json").read_bytes()


def test_event_count_bounds(tmp_path):
    summary = generate_corpus(tmp_path, _small(n_videos=100, holdout=10), seed=0)
    assert 100 <= summary["events"] <= 500
    records = load_annotations(tmp_path / "annotations.json")
    assert all(1 <= len(r.events) <= 5 for r in records)
    splits = json.loads((tmp_path / "splits.json").read_text())
    assert len(splits["train"]) == 90 and len(splits["val"]) == 10
    assert not set(splits["train"]) & set(splits["val"])


def test_overlap_and_signal_layout(tmp_path):
    cfg = _small(n_videos=30)
    generate_corpus(tmp_path, cfg, seed=1)
    for r in load_annotations(tmp_path / "annotations.json"):
        segs = r.normalized_segments()
        for i in range(len(segs)):
            for j in range(i + 1, len(segs)):
                inter = min(segs[i, 1], segs[j, 1]) - max(segs[i, 0], segs[j, 0])
                shorter = min(segs[i, 1] - segs[i, 0], segs[j, 1] - segs[j, 0])
                assert inter <= cfg.max_overlap * shorter + 0.01


def test_infeasible_config():
    with pytest.raises(InfeasibleConfigError):
        check_feasible(SynthConfig(max_events=5, min_length=0.3, max_length=0.4, max_overlap=0.0))
    with pytest.raises(InfeasibleConfigError):
        check_feasible(SynthConfig(num_classes=40))


def _segment_means(root):
    meta = json.loads((root / "metadata.json").read_text())
    X, y = [], []
    for r in load_annotations(root / "annotations.json"):
        feats = read_feature_file(root / "features" / f"{r.video_id}.bin").features
        centers = (np.arange(len(feats)) + 0.5) / len(feats)
        for (s, e), m in zip(r.normalized_segments(), meta[r.video_id]):
            inside = (centers >= s) & (centers < e)
            if inside.any():
                X.append(feats[inside].mean(0))
                y.append(m["class"])
    return np.array(X), np.array(y)


def test_linear_probe_recovers_classes(tmp_path):
    generate_corpus(tmp_path, _small(n_videos=200, holdout=0), seed=0)
    X, y = _segment_means(tmp_path)
    half = len(X) // 2
    probe = LogisticRegression(max_iter=2000).fit(X[:half], y[:half])
    assert probe.score(X[half:], y[half:]) >= 0.95


def test_tokenize_rules():
    vocab = Vocabulary.build(["A man runs."])
    ids = tokenize("A man runs.", vocab)
    assert [vocab.itos[i] for i in ids] == ["a", "man", "runs", "<eos>"]
    assert tokenize("a zebra", vocab) == [vocab.stoi["a"], UNK, EOS]
    assert vocab.decode(ids) == "a man runs"


def test_vocabulary_round_trip(tmp_path):
    vocab = Vocabulary.build(["the cat sat", "a dog ran"])
    vocab.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == vocab
    with pytest.raises(ValueError):
        Vocabulary(["a", "b"])


def test_annotation_round_trip_and_errors(tmp_path):
    recs = [AnnotationRecord("v1", 20.0, [((0.0, 5.0), "a man runs"), ((6.5, 20.0), "a dog sits")])]
    write_annotations(recs, tmp_path / "a.json")
    assert load_annotations(tmp_path / "a.json") == recs
    with pytest.raises(AnnotationError):
        AnnotationRecord("v", 10.0, [((2.0, 11.0), "x")])
    with pytest.raises(AnnotationError):
        AnnotationRecord("v", 10.0, [])
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(AnnotationError, match="malformed JSON"):
        load_annotations(tmp_path / "bad.json")
    (tmp_path / "bad2.json").write_text(json.dumps({"v": {"duration": 3, "timestamps": [[0, 1]], "sentences": []}}))
    with pytest.raises(AnnotationError):
        load_annotations(tmp_path / "bad2.json")


def test_corpus_loader(tmp_path):
    generate_corpus(tmp_path, _small(), seed=0)
    corpus = Corpus(tmp_path, T=16)
    vid = corpus.split("train")[0]
    s = corpus.sample(vid)
    assert s.frames.shape == (16, 32) and s.segments.shape[1] == 2
    assert (s.captions[:, 0] != 0).all() and corpus.sample(vid) is s
    assert corpus.c_in == 32
