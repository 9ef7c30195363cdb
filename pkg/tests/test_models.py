import numpy as np
import pytest

from reprosim import data, models
from reprosim.errors import BlockedAccountError, ConfigError, ShapeError

FAST = models.ClassifierConfig(hidden=(48,), epochs=10, batch_size=16, learning_rate=2e-3)


@pytest.fixture(scope="module")
def small_world():
    ds = data.gen_source_dataset(1, num_classes=4, per_class=30, size=10)
    clf = models.train_source_classifier(ds, FAST, seed=2)
    return ds, clf


def test_training_reaches_holdout_accuracy(small_world):
    _, clf = small_world
    assert clf.meta.holdout_accuracy >= 0.9


def test_training_deterministic():
    ds = data.gen_source_dataset(3, num_classes=3, per_class=12, size=8)
    a = models.train_source_classifier(ds, FAST, seed=5)
    b = models.train_source_classifier(ds, FAST, seed=5)
    for pa, pb in zip(a.net.params(), b.net.params()):
        assert np.array_equal(pa, pb)


def test_single_class_dataset_trains_to_perfect():
    samples = np.clip(np.random.default_rng(0).normal(0, 0.3, size=(20, 6, 6, 3)), -1, 1)
    ds = data.LabeledDataset(samples, np.zeros(20, dtype=np.int64), "source", num_classes=1)
    clf = models.train_source_classifier(ds, FAST, seed=1)
    assert clf.meta.holdout_accuracy == 1.0


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_training_divergence_raises():
    # a step size large enough to overflow the weights within one epoch
    ds = data.gen_source_dataset(4, num_classes=3, per_class=12, size=8)
    explosive = models.ClassifierConfig(hidden=(16,), epochs=4, batch_size=8, learning_rate=1e200)
    with pytest.raises(models.TrainingError):
        models.train_source_classifier(ds, explosive, seed=0)


def test_accuracy_chance_level_for_random_net(small_world):
    ds, _ = small_world
    rng = np.random.default_rng(9)
    net = models.build_classifier_net(ds.sample_dims, ds.num_classes, (16,), rng)
    clf = models.Classifier(net, ds.num_classes)
    acc = models.accuracy(clf, ds)
    assert abs(acc - 1 / ds.num_classes) <= 0.05


def test_accuracy_empty_dataset_is_error(small_world):
    ds, clf = small_world
    empty = data.LabeledDataset(np.zeros((0,) + ds.sample_dims), np.zeros(0, dtype=np.int64), "source")
    with pytest.raises(ConfigError):
        models.accuracy(clf, empty)


def test_trained_classifier_gradients_check_out(small_world):
    ds, clf = small_world
    from reprosim import numkernel as nk

    err = nk.finite_diff_check(clf.net, ds.samples[0])
    assert err < 1e-5


def test_scores_sum_to_one(small_world):
    ds, clf = small_world
    chan = models.QueryChannel(clf)
    s = chan.predict_scores("u", ds.samples[0])
    assert abs(s.sum() - 1.0) <= 1e-12


def test_channel_counts_and_identical_scores(small_world):
    ds, clf = small_world
    chan = models.QueryChannel(clf)
    s1 = chan.predict_scores("u", ds.samples[0])
    s2 = chan.predict_scores("u", ds.samples[0])
    assert np.array_equal(s1, s2)
    assert chan.queries_for("u") == 2
    assert chan.total_queries() == 2


def test_channel_purity_across_accounts(small_world):
    ds, clf = small_world
    chan = models.QueryChannel(clf)
    baseline = chan.predict_scores("a", ds.samples[3])
    for i in range(5):
        chan.predict_scores("b", ds.samples[i])
    assert np.array_equal(chan.predict_scores("a", ds.samples[3]), baseline)


def test_observer_sees_records_in_order(small_world):
    ds, clf = small_world

    class Recorder:
        def __init__(self):
            self.seen = []

        def is_banned(self, account):
            return False

        def observe(self, record):
            self.seen.append((record.account, record.index))
            return "pass"

    rec = Recorder()
    chan = models.QueryChannel(clf, observer=rec)
    script = ["a", "a", "b", "a", "b"]
    for i, account in enumerate(script):
        chan.predict_scores(account, ds.samples[i])
    assert rec.seen == [("a", 0), ("a", 1), ("b", 0), ("a", 2), ("b", 1)]


def test_blocked_account_gets_no_scores(small_world):
    ds, clf = small_world

    class Banner:
        def __init__(self):
            self.banned = set()

        def is_banned(self, account):
            return account in self.banned

        def observe(self, record):
            return "pass"

    banner = Banner()
    chan = models.QueryChannel(clf, observer=banner)
    chan.predict_scores("a", ds.samples[0])
    banner.banned.add("a")
    with pytest.raises(BlockedAccountError):
        chan.predict_scores("a", ds.samples[0])
    assert chan.queries_for("a") == 1  # the refused call was never answered


def test_batch_matches_sequential(small_world):
    ds, clf = small_world

    class Recorder:
        def __init__(self):
            self.seen = []

        def is_banned(self, account):
            return False

        def observe(self, record):
            self.seen.append(record.index)
            return "pass"

    ra, rb = Recorder(), Recorder()
    chan_a = models.QueryChannel(clf, observer=ra)
    chan_b = models.QueryChannel(clf, observer=rb)
    xs = ds.samples[:6]
    batch = chan_a.predict_scores_batch("u", xs)
    single = np.stack([chan_b.predict_scores("u", x) for x in xs])
    assert np.allclose(batch, single, atol=1e-12)
    assert chan_a.queries_for("u") == chan_b.queries_for("u") == 6
    assert ra.seen == rb.seen


def test_batch_ban_mid_way_returns_answered_rows(small_world):
    ds, clf = small_world

    class BanAfterTwo:
        def __init__(self):
            self.banned = set()
            self.count = 0

        def is_banned(self, account):
            return account in self.banned

        def observe(self, record):
            self.count += 1
            if self.count == 2:
                self.banned.add(record.account)
            return "pass"

    chan = models.QueryChannel(clf, observer=BanAfterTwo())
    with pytest.raises(BlockedAccountError) as err:
        chan.predict_scores_batch("u", ds.samples[:5])
    assert len(err.value.scores) == 2
    assert chan.queries_for("u") == 2


def test_shape_error(small_world):
    _, clf = small_world
    chan = models.QueryChannel(clf)
    with pytest.raises(ShapeError):
        chan.predict_scores("u", np.zeros((3, 3, 3)))


def test_classifier_roundtrip(tmp_path, small_world):
    ds, clf = small_world
    path = tmp_path / "clf.rpgw"
    models.save_classifier(path, clf)
    loaded = models.load_classifier(path)
    x = ds.samples[0]
    assert np.array_equal(loaded.scores(x), clf.scores(x))
    assert loaded.meta.seed == clf.meta.seed
    assert loaded.num_classes == clf.num_classes
