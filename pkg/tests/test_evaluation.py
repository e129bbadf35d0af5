import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cytoslide import evaluation as E
from cytoslide.evaluation import ABNORMAL, NORMAL, ConfusionMatrix, ScoreRecord

PUBLISHED = {
    # tn, fp, fn, tp -> acc, prec, rec, f1, mcc
    "Resnet-50": ((589, 71, 78, 582), (0.8871, 0.8913, 0.8818, 0.8865, 0.7742)),
    "VGG-19": ((581, 79, 68, 592), (0.8886, 0.8823, 0.8970, 0.8896, 0.7773)),
    "Densenet-121": ((611, 49, 131, 529), (0.8636, 0.9152, 0.8015, 0.8546, 0.7329)),
    "Inception_v3": ((429, 231, 57, 603), (0.7818, 0.7230, 0.9136, 0.8072, 0.5843)),
}


def rec(label, score, i=0):
    return ScoreRecord(str(i), label, score)


def random_records(rng, n, levels=None):
    labels = rng.random(n) < 0.5
    labels[:2] = (True, False)
    s = rng.random(n)
    if levels:
        s = np.round(s * levels) / levels
    return [ScoreRecord(str(i), ABNORMAL if p else NORMAL, float(v)) for i, (p, v) in enumerate(zip(labels, s))]


def mann_whitney(records):
    pos = [r.score for r in records if r.true_label == ABNORMAL]
    neg = [r.score for r in records if r.true_label == NORMAL]
    wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def test_confusion_examples():
    assert E.confusion([rec(ABNORMAL, 0.9), rec(NORMAL, 0.4)]) == ConfusionMatrix(1, 1, 0, 0)
    assert E.confusion([rec(ABNORMAL, 1.0)] * 7) == ConfusionMatrix(7, 0, 0, 0)
    assert E.confusion([rec(NORMAL, 0.5)]) == ConfusionMatrix(0, 0, 1, 0)
    with pytest.raises(ValueError):
        E.confusion([])


# The printed MCC column is truncated, not rounded, to 4 decimals; for three rows
# the exact coefficient lies 5e-5 to 9e-5 above the printed value.
MCC_TRUNCATED = {"Resnet-50", "VGG-19", "Densenet-121"}


def published_metrics(model):
    (tn, fp, fn, tp), expect = PUBLISHED[model]
    m = E.metrics(ConfusionMatrix(tp, tn, fp, fn))
    return (m.acc, m.prec, m.rec, m.f1, m.mcc), expect


@pytest.mark.parametrize("model", sorted(PUBLISHED))
def test_published_acc_prec_rec_f1(model):
    got, expect = published_metrics(model)
    for g, e in zip(got[:4], expect[:4]):
        assert abs(g - e) <= 0.00005


@pytest.mark.parametrize("model", [
    pytest.param(k, marks=pytest.mark.xfail(strict=True, reason="printed MCC is truncated"))
    if k in MCC_TRUNCATED else k for k in sorted(PUBLISHED)])
def test_published_mcc(model):
    got, expect = published_metrics(model)
    assert abs(got[4] - expect[4]) <= 0.00005


@pytest.mark.parametrize("model", sorted(PUBLISHED))
def test_published_mcc_is_truncated_exact_value(model):
    got, expect = published_metrics(model)
    assert np.floor(got[4] * 1e4) / 1e4 == pytest.approx(expect[4], abs=1e-12)


def test_perfect_and_zero_denominators():
    m = E.metrics(ConfusionMatrix(10, 10, 0, 0))
    assert (m.acc, m.prec, m.rec, m.f1, m.mcc) == (1, 1, 1, 1, 1)
    m = E.metrics(ConfusionMatrix(0, 5, 0, 0))
    assert (m.prec, m.rec, m.f1, m.mcc) == (0, 0, 0, 0)
    with pytest.raises(ValueError):
        E.metrics(ConfusionMatrix(0, 0, 0, 0))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_metric_ranges_and_mcc_symmetry(tp, tn, fp, fn):
    if tp + tn + fp + fn == 0:
        return
    m = E.metrics(ConfusionMatrix(tp, tn, fp, fn))
    for v in (m.acc, m.prec, m.rec, m.f1):
        assert 0 <= v <= 1
    assert -1 - 1e-12 <= m.mcc <= 1 + 1e-12
    assert E.metrics(ConfusionMatrix(tn, tp, fn, fp)).mcc == pytest.approx(m.mcc, abs=1e-12)


def test_brute_force_reclassification():
    rng = np.random.default_rng(0)
    for t in (0.0, 0.2, 0.5, 0.77, 1.0):
        recs = random_records(rng, 300, levels=20)
        pred = [r.score >= t for r in recs]
        pos = [r.true_label == ABNORMAL for r in recs]
        tp = sum(p and q for p, q in zip(pred, pos))
        tn = sum(not p and not q for p, q in zip(pred, pos))
        fp = sum(p and not q for p, q in zip(pred, pos))
        fn = sum(not p and q for p, q in zip(pred, pos))
        assert E.confusion(recs, t) == ConfusionMatrix(tp, tn, fp, fn)


def test_roc_examples():
    sep = [rec(ABNORMAL, 0.9), rec(ABNORMAL, 0.8), rec(NORMAL, 0.3), rec(NORMAL, 0.1)]
    curve = E.roc(sep)
    assert curve.auc == 1.0
    assert E.q_point(curve)[:2] == (0.0, 1.0)
    same = [rec(ABNORMAL, 0.4), rec(NORMAL, 0.4), rec(NORMAL, 0.4)]
    curve = E.roc(same)
    assert curve.fpr.tolist() == [0, 1] and curve.tpr.tolist() == [0, 1]
    assert curve.auc == 0.5
    assert E.q_point(curve)[:2] == (0.0, 0.0)
    with pytest.raises(ValueError):
        E.roc([rec(ABNORMAL, 0.1), rec(ABNORMAL, 0.3)])


@pytest.mark.parametrize("levels", [None, 10])
def test_auc_matches_mann_whitney(levels):
    recs = random_records(np.random.default_rng(7), 200, levels)
    assert abs(E.roc(recs).auc - mann_whitney(recs)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 80))
def test_roc_invariants(seed, n):
    recs = random_records(np.random.default_rng(seed), n, levels=8)
    curve = E.roc(recs)
    assert (curve.fpr[0], curve.tpr[0]) == (0, 0)
    assert (curve.fpr[-1], curve.tpr[-1]) == (1, 1)
    assert (np.diff(curve.fpr) >= 0).all() and (np.diff(curve.tpr) >= 0).all()
    assert 0 <= curve.auc <= 1
    for f in (lambda x: x ** 3, lambda x: 1 / (1 + np.exp(-8 * (x - 0.5)))):
        moved = [r._replace(score=float(f(r.score))) for r in recs]
        assert E.roc(moved).auc == pytest.approx(curve.auc, abs=1e-12)


def test_q_point_enumerated():
    c = E.RocCurve(np.array([0, 0.1, 0.4, 1]), np.array([0, 0.8, 0.9, 1]),
                   np.array([np.inf, 0.7, 0.4, 0.1]), 0.0)
    f, t, th = E.q_point(c)
    assert (f, t, th) == (0.1, 0.8, 0.7)
    assert t + 1 - f == pytest.approx(1.7)


# --- features -------------------------------------------------------------

def test_features_examples():
    f = E.extract_features(np.full((128, 128, 3), 255, np.uint8))
    assert f.shape == (len(E.FEATURE_NAMES),)
    assert f[0] == 0 and f[3] == 0
    assert E.extract_features(np.zeros((128, 128, 3), np.uint8))[3] == 1
    yy, xx = np.mgrid[:128, :128]
    img = np.full((128, 128, 3), (230, 215, 225), np.uint8)
    img[(xx - 64) ** 2 + (yy - 64) ** 2 <= 40 ** 2] = (90, 50, 120)
    f = E.extract_features(img)
    assert abs(f[0] - np.pi * 40 ** 2 / 16384) <= 0.02
    assert f[5] == 1


# --- logistic baseline -------------------------------------------------------

def test_train_config_validation():
    for kw in ({"learning_rate": 0}, {"momentum": 1.0}, {"momentum": -0.1}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            E.TrainConfig(**kw)
    c = E.TrainConfig()
    assert (c.learning_rate, c.momentum, c.batch_size, c.max_epochs) == (0.005, 0.9, 32, 500)


def test_predict_examples():
    m = E.LogisticModel.zeros(3)
    assert E.predict(m, [1.0, -4.0, 2.0]) == 0.5
    m.bias = 50.0
    assert E.predict(m, [0.0, 0.0, 0.0]) > 0.999999
    m = E.LogisticModel(np.array([0.7, -0.2]), 0.1, np.zeros(2), np.ones(2))
    scores = [E.predict(m, [x, 1.0]) for x in np.linspace(-5, 5, 41)]
    assert all(b >= a for a, b in zip(scores, scores[1:]))
    with pytest.raises(ValueError):
        E.predict(m, [1.0, 2.0, 3.0])


def test_gradient_finite_difference():
    rng = np.random.default_rng(3)
    for _ in range(5):
        X = rng.normal(size=(32, 6))
        y = (rng.random(32) < 0.5).astype(float)
        w, b = rng.normal(size=6), float(rng.normal())
        _, gw, gb = E.loss_and_grad(w, b, X, y)
        eps = 1e-5
        num = np.array([(E.loss_and_grad(w + eps * e, b, X, y)[0] - E.loss_and_grad(w - eps * e, b, X, y)[0])
                        / (2 * eps) for e in np.eye(6)])
        num_b = (E.loss_and_grad(w, b + eps, X, y)[0] - E.loss_and_grad(w, b - eps, X, y)[0]) / (2 * eps)
        ana = np.r_[gw, gb]
        fd = np.r_[num, num_b]
        assert np.max(np.abs(ana - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-4


def separable(rng, n=400):
    X = rng.normal(size=(n, 2)) * 3
    d = X @ np.array([0.6, 0.8]) - 0.5
    keep = np.abs(d) >= 1
    X, d = X[keep], d[keep]
    return X, (d > 0).astype(float)


def test_separable_accuracy():
    X, y = separable(np.random.default_rng(0))
    m = E.train_logistic(X, y, cfg=E.TrainConfig(seed=1))
    acc = ((E.predict(m, X) >= 0.5) == (y > 0.5)).mean()
    assert acc >= 0.98
    assert np.isfinite(m.weights).all() and np.isfinite(m.bias)


def test_full_batch_loss_non_increasing():
    X, y = separable(np.random.default_rng(2), 200)
    X = X + np.random.default_rng(3).normal(size=X.shape) * 2  # overlap, so loss stays bounded away from 0
    cfg = E.TrainConfig(learning_rate=0.05, momentum=0.0, batch_size=len(y), max_epochs=200)
    h = E.train_logistic(X, y, cfg=cfg).history
    assert len(h) == 200
    assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))


def test_training_deterministic_and_errors():
    X, y = separable(np.random.default_rng(4), 120)
    cfg = E.TrainConfig(max_epochs=20, seed=9)
    a, b = E.train_logistic(X, y, cfg=cfg), E.train_logistic(X, y, cfg=cfg)
    assert a.to_json() == b.to_json()
    assert E.LogisticModel.from_json(a.to_json()).to_json() == a.to_json()
    with pytest.raises(ValueError):
        E.train_logistic(X, np.ones(len(X)))


# --- score files -------------------------------------------------------------

def test_ingest_scores(tmp_path, caplog):
    p = tmp_path / "s.csv"
    p.write_text("id,true_label,score\nb,Abnormal,0.9\na,normal,0.1\nc,NORMAL,0.5\n")
    out = E.ingest_scores(p)
    assert [r.id for r in out] == ["b", "a", "c"]
    assert [r.true_label for r in out] == [ABNORMAL, NORMAL, NORMAL]
    p.write_text("id,true_label,score\na,normal,0.1\nb,abnormal,1.2\n")
    with pytest.raises(E.ScoreFormatError, match=":3:"):
        E.ingest_scores(p)
    p.write_text("a,cancer,0.3\n")
    with pytest.raises(E.ScoreFormatError, match=":1:"):
        E.ingest_scores(p)
    p.write_text("a,normal\n")
    with pytest.raises(E.ScoreFormatError, match="3 fields"):
        E.ingest_scores(p)
    p.write_text("")
    assert E.ingest_scores(p) == []
    assert "no score records" in caplog.text


def test_report_format():
    (tn, fp, fn, tp), _ = PUBLISHED["Resnet-50"]
    recs = E.records_from_confusion(ConfusionMatrix(tp, tn, fp, fn))
    cm, m, curve = E.evaluate(recs)
    text = E.format_report(cm, m, curve)
    lines = text.splitlines()
    assert lines[:9] == ["tn 589", "fp 71", "fn 78", "tp 582", "acc 0.8871", "prec 0.8913",
                         "rec 0.8818", "f1 0.8865", "mcc 0.7743"]
    assert lines[9].startswith("auc ") and lines[10].startswith("q_point ")
    assert E.roc_table(curve).splitlines()[0] == "fpr,tpr"
    assert E.parse_scores(E.dump_scores(recs)) == recs
