import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commacloud.exceptions import PreconditionError, TrainingError
from commacloud.features import HOG_DIM, MOTION_DIM, MOTION_HISTOGRAM, SEGMENTED_HOG
from commacloud.learning import (
    AdaBoostModel,
    AdaBoostStumps,
    Stump,
    WeakClassifier,
    WeakEnsemble,
    adaboost_proba,
    balanced_accuracy,
    make_batches,
    train_adaboost,
    train_weak,
    weak_proba,
)


# --------------------------------------------------------------------------
# batches


def test_singleton_batches():
    batches = make_batches(np.arange(100), 1, 100)
    assert [b.tolist() for b in batches] == [[i] for i in range(100)]


def test_ten_thousand_negatives():
    rng = np.random.default_rng(0)
    times = np.sort(rng.integers(0, 5000, 10_000))
    batches = make_batches(times, 37, 100, seed=1)
    assert len(batches) == 100
    assert all(len(b) == 37 for b in batches)
    spans = [(times[b].min(), times[b].max()) for b in batches]
    # time segments follow each other without overlap
    assert all(hi < lo for (_, hi), (lo, _) in zip(spans, spans[1:]))


@given(st.lists(st.integers(0, 300), min_size=20, max_size=300), st.integers(1, 20), st.integers(1, 10))
@settings(deadline=None)
def test_batches_time_disjoint(times, n_pos, n_batches):
    times = np.array(times)
    if len(np.unique(times)) < n_batches:
        with pytest.raises(TrainingError):
            make_batches(times, n_pos, n_batches)
        return
    batches = make_batches(times, n_pos, n_batches)
    sets = [set(times[b].tolist()) for b in batches]
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            assert not sets[i] & sets[j]
    assert all(len(b) <= n_pos for b in batches)


def test_batches_need_enough_negatives():
    with pytest.raises(TrainingError):
        make_batches(np.arange(50), 5, 100)
    with pytest.raises(TrainingError):
        make_batches(np.zeros(500), 5, 100)


# --------------------------------------------------------------------------
# weak classifiers


def test_weak_separable():
    rng = np.random.default_rng(1)
    X = np.vstack([rng.normal(1, 0.3, (60, MOTION_DIM)), rng.normal(-1, 0.3, (60, MOTION_DIM))])
    y = np.r_[np.ones(60), np.zeros(60)].astype(int)
    clf = train_weak(X, y, MOTION_HISTOGRAM)
    assert np.mean((weak_proba(clf, X) >= 0.5) == y) >= 0.95


def test_weak_null_model():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(400, MOTION_DIM))
    y = rng.permutation(np.r_[np.ones(200), np.zeros(200)]).astype(int)
    clf = train_weak(X, y, MOTION_HISTOGRAM)
    Xt = rng.normal(size=(4000, MOTION_DIM))
    yt = rng.integers(0, 2, 4000)
    assert balanced_accuracy(yt, (weak_proba(clf, Xt) >= 0.5).astype(int)) == pytest.approx(0.5, abs=0.05)


def test_weak_deterministic_and_errors():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, HOG_DIM))
    y = (X[:, 0] > 0).astype(int)
    a, b = train_weak(X, y, SEGMENTED_HOG, seed=4), train_weak(X, y, SEGMENTED_HOG, seed=4)
    assert a.weights.tobytes() == b.weights.tobytes() and a.bias == b.bias
    with pytest.raises(TrainingError):
        train_weak(X, np.ones(50, int), SEGMENTED_HOG)
    with pytest.raises(PreconditionError):
        train_weak(X, y, MOTION_HISTOGRAM)


def test_weak_proba_examples():
    zero = WeakClassifier(MOTION_HISTOGRAM, np.zeros(MOTION_DIM), 0.0, 0)
    assert weak_proba(zero, np.ones(MOTION_DIM)) == 0.5
    big = WeakClassifier(MOTION_HISTOGRAM, np.full(MOTION_DIM, 10.0), 5.0, 0)
    assert weak_proba(big, np.ones(MOTION_DIM)) >= 0.999
    rng = np.random.default_rng(5)
    w, b, x = rng.normal(size=MOTION_DIM), 0.3, rng.normal(size=(7, MOTION_DIM))
    p = weak_proba(WeakClassifier(MOTION_HISTOGRAM, w, b, 0), x)
    q = weak_proba(WeakClassifier(MOTION_HISTOGRAM, -w, -b, 0), x)
    assert np.allclose(p + q, 1.0)
    with pytest.raises(PreconditionError):
        weak_proba(zero, np.ones(HOG_DIM))
    with pytest.raises(PreconditionError):
        WeakClassifier(SEGMENTED_HOG, np.zeros(27), 0.0, 0)


def _ensemble_data(seed, n_pos=30, n_neg=600, n_times=120):
    rng = np.random.default_rng(seed)
    pos = np.hstack([rng.normal(0.5, 1, (n_pos, HOG_DIM)), rng.dirichlet(np.ones(MOTION_DIM), n_pos)])
    neg = np.hstack([rng.normal(-0.5, 1, (n_neg, HOG_DIM)), rng.dirichlet(np.ones(MOTION_DIM), n_neg)])
    X = np.vstack([pos, neg])
    y = np.r_[np.ones(n_pos), np.zeros(n_neg)].astype(int)
    times = np.r_[rng.integers(0, n_times, n_pos), np.sort(rng.integers(0, n_times, n_neg))]
    return X, y, times


def test_ensemble_layout():
    X, y, times = _ensemble_data(6)
    ens = WeakEnsemble(n_batches=10, seed=0).fit(X, y, times)
    assert len(ens.hog_classifiers_) == len(ens.motion_classifiers_) == 10
    assert [c.batch for c in ens.hog_classifiers_] == list(range(10))
    Z = ens.transform(X)
    assert Z.shape == (len(X), 20)
    assert np.all((Z >= 0) & (Z <= 1))
    assert np.allclose(Z[:, 0], weak_proba(ens.hog_classifiers_[0], X[:, :HOG_DIM]))
    assert np.allclose(Z[:, 10], weak_proba(ens.motion_classifiers_[0], X[:, HOG_DIM:]))
    clone = WeakEnsemble.from_classifiers(ens.classifiers_)
    assert np.array_equal(clone.transform(X), Z)


def test_ensemble_shrinks_batches_to_distinct_times():
    X, y, times = _ensemble_data(7, n_times=6)
    ens = WeakEnsemble(n_batches=10).fit(X, y, times)
    assert ens.n_batches_ == len(np.unique(times[y == 0]))


# --------------------------------------------------------------------------
# AdaBoost


def _brute_best_stump(X, y, w):
    best = None
    n, d = X.shape
    for f in range(d):
        vals = np.unique(X[:, f])
        cands = [-np.inf] + [0.5 * (a + b) for a, b in zip(vals, vals[1:])] + [np.inf]
        for thr in cands:
            for pol in (1, -1):
                above = X[:, f] >= thr
                pred = above if pol > 0 else ~above
                err = float(np.sum(w[pred != (y == 1)]))
                if best is None or err < best[0] - 1e-15:
                    best = (err, f, thr, pol)
    return best


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_first_stump_is_optimal(seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.random((30, 4)), 2)
    y = rng.integers(0, 2, 30)
    if len(np.unique(y)) < 2:
        return
    model = train_adaboost(X, y, rounds=1)
    err, *_ = _brute_best_stump(X, y, np.full(30, 1 / 30))
    if err >= 0.5:
        return
    assert model.weighted_errors[0] == pytest.approx(err)


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.4))
@settings(max_examples=25, deadline=None)
def test_training_error_never_rises(seed, noise):
    rng = np.random.default_rng(seed)
    X = rng.random((150, 6))
    y = ((X[:, 0] + X[:, 1] > 1.0) ^ (rng.random(150) < noise)).astype(int)
    if len(np.unique(y)) < 2:
        return
    model = train_adaboost(X, y, rounds=30)
    errs = model.train_errors
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert errs[0] <= min(np.mean(y), 1 - np.mean(y))
    assert errs[-1] <= model.error_bound() + 1e-12


def test_perfect_feature_single_round():
    rng = np.random.default_rng(8)
    X = rng.random((50, 5))
    y = (X[:, 3] > 0.4).astype(int)
    model = train_adaboost(X, y, rounds=40)
    assert model.train_errors[0] == 0.0
    assert model.rounds[0].feature == 3
    assert len(model.rounds) == 1


def test_training_error_bound_and_alphas():
    rng = np.random.default_rng(9)
    X = rng.random((300, 6))
    y = ((X[:, 0] + X[:, 1] + 0.3 * rng.random(300)) > 1.1).astype(int)
    model = train_adaboost(X, y, rounds=40)
    assert all(s.alpha > 0 for s in model.rounds)
    assert all(e < 0.5 for e in model.weighted_errors)
    for k, s in enumerate(model.rounds):
        e = model.weighted_errors[k]
        assert s.alpha == pytest.approx(0.5 * np.log((1 - e) / e))
    assert model.train_errors[-1] <= model.error_bound() + 1e-12
    pred = (adaboost_proba(model, X) >= 0.5).astype(int)
    assert np.mean(pred != y) == pytest.approx(model.train_errors[-1])


def test_proba_examples():
    stumps = (Stump(0, 0.5, 1, 1.0), Stump(1, 0.5, 1, 2.0))
    model = AdaBoostModel(stumps, 2)
    assert adaboost_proba(model, np.array([1.0, 1.0])) > 0.5
    assert adaboost_proba(AdaBoostModel((Stump(0, 0.5, 1, 1.0), Stump(1, 0.5, 1, 1.0)), 2), np.array([1.0, 0.0])) == 0.5
    xs = np.column_stack([np.linspace(0, 1, 50), np.linspace(0, 1, 50)])
    assert np.all(np.diff(adaboost_proba(model, xs)) >= 0)
    with pytest.raises(PreconditionError):
        AdaBoostModel((), 2)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_splitting_a_round_keeps_proba(seed):
    rng = np.random.default_rng(seed)
    X = rng.random((80, 4))
    y = (X[:, 0] > 0.5).astype(int) ^ (rng.random(80) < 0.2)
    if len(np.unique(y)) < 2:
        return
    model = train_adaboost(X, y, rounds=5)
    first = model.rounds[0]
    half = Stump(first.feature, first.threshold, first.polarity, first.alpha / 2)
    split = AdaBoostModel((half, half) + model.rounds[1:], model.n_features)
    assert np.allclose(adaboost_proba(model, X), adaboost_proba(split, X))


def test_adaboost_errors_and_estimator():
    with pytest.raises(TrainingError):
        train_adaboost(np.zeros((5, 2)), np.ones(5, int))
    rng = np.random.default_rng(10)
    X = rng.random((100, 3))
    y = (X[:, 2] > 0.3).astype(int)
    est = AdaBoostStumps(n_rounds=10).fit(X, y)
    assert est.predict_proba(X).shape == (100, 2)
    assert np.mean(est.predict(X) == y) == 1.0


def test_balanced_accuracy():
    assert balanced_accuracy([1, 1, 0, 0], [1, 0, 0, 0]) == 0.75
    assert balanced_accuracy([0, 0, 0, 1], [0, 0, 0, 1]) == 1.0
