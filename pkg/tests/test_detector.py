import numpy as np
import pytest

from reprosim import data, detector as det, encoder as enc
from reprosim import numkernel as nk
from reprosim.errors import ConfigError, InvariantError, UndefinedStatError


def identity_encoder(dim=1):
    return enc.SimilarityEncoder(nk.FeedforwardNet([], (dim,)), margin=1.0)


def make_cfg(k=3, threshold=0.5, dim=1, ban=False):
    return det.DetectorConfig(k=k, threshold=threshold, encoder=identity_encoder(dim), ban_on_detect=ban)


def observe_all(state, cfg, points):
    return [det.observe(state, cfg, np.atleast_1d(np.float64(p))) for p in points]


def test_four_identical_queries_one_detection():
    cfg = make_cfg(k=3, threshold=0.5)
    state = det.DetectorState(1)
    verdicts = observe_all(state, cfg, [0.0, 0.0, 0.0, 0.0])
    assert verdicts == ["pass", "pass", "pass", "flagged"]
    assert state.detections == 1
    assert state.size == 0  # buffer cleared, flagged embedding discarded
    assert state.queries == 4


def test_far_apart_queries_never_flag():
    cfg = make_cfg(k=3, threshold=0.5)
    state = det.DetectorState(1)
    verdicts = observe_all(state, cfg, [10.0 * i for i in range(10)])
    assert verdicts == ["pass"] * 10
    assert state.detections == 0


def test_ten_query_narrative_replay():
    """Scripted ten-query stream with k=3: a detection consumes its window.

    The first four identical queries (a, b, c, d) flag on d and clear the
    buffer; the next cluster flags again on its fourth query; the stream of
    ten can never produce more than floor(10/4) = 2 detections.
    """
    cfg = make_cfg(k=3, threshold=0.5)
    state = det.DetectorState(1)
    tight = [0.0, 0.01, 0.02, 0.015, 5.0, 5.01, 5.02, 5.015, 9.0, 20.0]
    verdicts = observe_all(state, cfg, tight)
    assert verdicts == ["pass"] * 3 + ["flagged"] + ["pass"] * 3 + ["flagged"] + ["pass"] * 2
    assert state.detections == 2 == state.queries // (cfg.k + 1)

    # variant where the fourth query is far: the detector moves on and
    # compares the fifth against the three nearest of (a, b, c, d)
    state2 = det.DetectorState(1)
    spread = [0.0, 0.01, 0.02, 50.0, 0.015, 100.0, 101.0, 102.0, 103.0, 104.0]
    verdicts2 = observe_all(state2, cfg, spread)
    assert verdicts2[3] == "pass"  # far query passes
    assert verdicts2[4] == "flagged"  # near the 3 nearest of the buffer
    assert state2.detections == 1
    assert state2.detections <= state2.queries // (cfg.k + 1)


def test_threshold_tie_passes():
    cfg = make_cfg(k=2, threshold=1.0)
    state = det.DetectorState(1)
    # mean distance to the two buffered points is exactly 1.0
    verdicts = observe_all(state, cfg, [0.0, 2.0, 1.0])
    assert verdicts == ["pass", "pass", "pass"]


def test_warmup_after_clear():
    cfg = make_cfg(k=3, threshold=0.5)
    state = det.DetectorState(1)
    observe_all(state, cfg, [0.0, 0.0, 0.0, 0.0])  # detection empties buffer
    verdicts = observe_all(state, cfg, [1.0, 1.0, 1.0])
    assert verdicts == ["pass"] * 3  # no verdict possible before k+1 queries
    assert det.observe(state, cfg, np.array([1.0])) == "flagged"


def test_knn_uses_k_smallest():
    cfg = make_cfg(k=2, threshold=0.2)
    state = det.DetectorState(1)
    # buffer holds far points and two near ones; the 2-NN mean is small
    observe_all(state, cfg, [100.0, 200.0, 0.05, 0.1])
    assert det.observe(state, cfg, np.array([0.075])) == "flagged"


def test_detection_bound_runtime_assertion():
    state = det.DetectorState(1)
    state.queries = 10
    state.detections = 3  # bound for k=3 is floor(10/4) = 2
    cfg = make_cfg(k=3)
    with pytest.raises(InvariantError):
        det.observe_embedding(state, cfg, np.array([1000.0]))


def test_reset_semantics():
    cfg = make_cfg(k=2, threshold=0.5)
    state = det.DetectorState(1)
    observe_all(state, cfg, [0.0, 0.0, 0.0])
    assert state.detections == 1
    det.reset(state)
    assert state.size == 0 and state.queries == 3 and state.detections == 1
    det.reset(state, zero_counters=True)
    assert state.queries == 0 and state.detections == 0


def test_stats_published_rows():
    # arithmetic from the published detection tables (k = 50)
    s = det.stats(1810, 50, 110400)
    assert s.normalized_rate * 100 == pytest.approx(83.61, abs=0.01)
    s = det.stats(980, 50, 51480)
    assert s.normalized_rate * 100 == pytest.approx(97.09, abs=0.01)
    assert det.stats(0, 50, 1000).normalized_rate == 0.0


def test_stats_from_state_and_errors():
    state = det.DetectorState(1)
    with pytest.raises(UndefinedStatError):
        det.stats(state, 3)
    state.queries = 8
    state.detections = 2
    s = det.stats(state, 3)
    assert s.rate == pytest.approx(0.25)
    assert s.normalized_rate == pytest.approx(1.0)


def test_first_k_verdicts_permutation_invariant():
    cfg = make_cfg(k=4, threshold=0.5)
    points = [3.0, 1.0, 4.0, 1.5]
    for perm in ([0, 1, 2, 3], [3, 2, 1, 0], [1, 3, 0, 2]):
        state = det.DetectorState(1)
        verdicts = observe_all(state, cfg, [points[i] for i in perm])
        assert verdicts == ["pass"] * 4


def test_calibration_quantile_extremes():
    ds = data.gen_source_dataset(1, num_classes=3, per_class=30, size=8)
    rng = np.random.default_rng(0)
    encoder = enc.SimilarityEncoder(enc.build_encoder_net((8, 8, 3), (16,), 6, rng), margin=1.0)

    rho0 = det.calibrate_threshold(encoder, ds, k=5, target_fpr=0.0, seed=3)
    assert det.measure_noreset_fpr(encoder, ds, 5, rho0, seed=3) == 0.0

    rho1 = det.calibrate_threshold(encoder, ds, k=5, target_fpr=1.0, seed=3)
    assert det.measure_noreset_fpr(encoder, ds, 5, rho1, seed=3) == 1.0


def test_calibration_low_fpr_bound():
    ds = data.gen_source_dataset(2, num_classes=6, per_class=180, size=8)
    rng = np.random.default_rng(1)
    encoder = enc.SimilarityEncoder(enc.build_encoder_net((8, 8, 3), (16,), 6, rng), margin=1.0)
    rho = det.calibrate_threshold(encoder, ds, k=10, target_fpr=0.001, seed=4)
    # same-permutation restream reproduces the calibration quantile
    fpr_same = det.measure_noreset_fpr(encoder, ds, 10, rho, seed=4)
    assert 0.0 <= fpr_same <= 0.003
    # fresh permutation stays within the discreteness bound
    fpr_fresh = det.measure_noreset_fpr(encoder, ds, 10, rho, seed=5)
    assert 0.0 <= fpr_fresh <= 0.003


def test_calibration_too_small():
    ds = data.gen_source_dataset(3, num_classes=2, per_class=2, size=8)
    rng = np.random.default_rng(2)
    encoder = enc.SimilarityEncoder(enc.build_encoder_net((8, 8, 3), (16,), 6, rng), margin=1.0)
    with pytest.raises(ConfigError):
        det.calibrate_threshold(encoder, ds, k=10, target_fpr=0.001, seed=0)


def test_stateful_detector_bans_and_logs():
    cfg = make_cfg(k=2, threshold=0.5, ban=True)
    service = det.StatefulDetector(cfg, keep_log=True)

    class Record:
        def __init__(self, account, x):
            self.account = account
            self.x = x

    for value in (0.0, 0.0):
        assert service.observe(Record("mallory", np.array([value]))) == "pass"
    assert service.observe(Record("mallory", np.array([0.0]))) == "flagged"
    assert service.is_banned("mallory")
    assert not service.is_banned("alice")
    assert service.detections_for("mallory") == 1
    assert service.total_queries() == 3
    assert len(service.log) == 3
    account, index, before, dist, verdict = service.log[-1]
    assert (account, index, before, verdict) == ("mallory", 2, 2, "flagged")
    assert dist == pytest.approx(0.0)
    warmup = service.log[0]
    assert warmup[3] is None


def test_fresh_account_starts_clean():
    cfg = make_cfg(k=2, threshold=0.5, ban=True)
    service = det.StatefulDetector(cfg)

    class Record:
        def __init__(self, account, x):
            self.account = account
            self.x = x

    for _ in range(3):
        service.observe(Record("a", np.array([0.0])))
    assert service.is_banned("a")
    # a new account has an empty buffer: same queries only warm it up
    assert service.observe(Record("b", np.array([0.0]))) == "pass"
    assert service.state_for("b").size == 1


def test_eq4_bound_fuzz():
    rng = np.random.default_rng(42)
    cfg = None
    state = None
    center = 0.0
    k = 1
    for step in range(100_000):
        if cfg is None or rng.random() < 0.001:
            k = int(rng.integers(1, 7))
            cfg = make_cfg(k=k, threshold=float(rng.uniform(0.05, 2.0)))
            state = det.DetectorState(1)
        if rng.random() < 0.3:
            center = float(rng.uniform(-100, 100))
        point = center + float(rng.normal(scale=rng.choice([0.01, 0.5, 5.0])))
        det.observe_embedding(state, cfg, np.array([point]))  # asserts the bound internally
        assert state.detections <= state.queries // (k + 1)
        if state.queries:
            assert 0.0 <= det.stats(state, k).normalized_rate <= 1.0
