"""End-to-end experiment scenarios, seeding, and report emission.

Every scenario is a pure function of (config, seed): component seeds are
derived from the run seed by name, so re-running a scenario reproduces the
emitted CSV byte for byte.
"""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import detector as det
from . import encoder as encmod
from . import reprogram as rp
from . import zoattack as zo
from .config import ScenarioConfig
from .data import LabeledDataset, PaddingSpec, gen_source_dataset, gen_target_dataset, make_pairs
from .errors import ConfigError
from .models import Classifier, ClassifierConfig, QueryChannel, train_source_classifier


def derive_seed(base: int, tag: str) -> int:
    """Stable per-component seed: mixes the run seed with a name hash."""
    mixed = np.random.SeedSequence((int(base), zlib.crc32(tag.encode())))
    return int(mixed.generate_state(1, dtype=np.uint64)[0] % (2**63))


@dataclass
class World:
    """Trained pieces shared by the scenario rows of one seeded run."""

    cfg: ScenarioConfig
    clf: Classifier
    mapping: rp.LabelMapping
    spec: PaddingSpec
    train_ds: LabeledDataset
    test_ds: LabeledDataset
    encoder: encmod.SimilarityEncoder | None = None
    threshold: float | None = None
    achieved_fpr: float | None = None
    surrogate: Classifier | None = None

    def detector_config(self) -> det.DetectorConfig:
        if self.encoder is None or self.threshold is None:
            raise ConfigError("world was built without a calibrated detector")
        return det.DetectorConfig(
            k=self.cfg.k,
            threshold=self.threshold,
            encoder=self.encoder,
            ban_on_detect=self.cfg.ban_on_detect,
        )


def gen_target_split(cfg: ScenarioConfig, train_count: int | None = None):
    """Disjoint train/test target sets drawn from the same family."""
    train_count = cfg.target_train if train_count is None else train_count
    train = gen_target_dataset(
        derive_seed(cfg.seed, "target-train"),
        cfg.target_classes,
        train_count // cfg.target_classes,
        cfg.target_size,
        cfg.channels,
    )
    test = gen_target_dataset(
        derive_seed(cfg.seed, "target-test"),
        cfg.target_classes,
        cfg.target_test // cfg.target_classes,
        cfg.target_size,
        cfg.channels,
    )
    return train, test


def build_source_dataset(cfg: ScenarioConfig) -> LabeledDataset:
    return gen_source_dataset(
        derive_seed(cfg.seed, "source-data"),
        cfg.source_classes,
        cfg.source_per_class,
        cfg.image_size,
        cfg.channels,
    )


def build_benign_dataset(cfg: ScenarioConfig) -> LabeledDataset:
    return gen_source_dataset(
        derive_seed(cfg.seed, "benign-data"),
        cfg.source_classes,
        cfg.benign_per_class,
        cfg.image_size,
        cfg.channels,
    )


def build_world(cfg: ScenarioConfig, with_encoder: bool = True, with_surrogate: bool = False) -> World:
    source = build_source_dataset(cfg)
    clf_cfg = ClassifierConfig(
        hidden=(cfg.hidden,),
        epochs=cfg.model_epochs,
        batch_size=cfg.model_batch,
        learning_rate=cfg.model_lr,
    )
    clf = train_source_classifier(source, clf_cfg, derive_seed(cfg.seed, "model"))
    mapping = rp.LabelMapping.consecutive_blocks(cfg.target_classes, cfg.group_size, cfg.source_classes)
    spec = PaddingSpec(inner=cfg.target_size, outer=cfg.image_size, channels=cfg.channels)
    train_ds, test_ds = gen_target_split(cfg)
    world = World(cfg, clf, mapping, spec, train_ds, test_ds)

    if with_surrogate:
        surr_cfg = ClassifierConfig(
            hidden=(cfg.surrogate_hidden,),
            epochs=cfg.model_epochs,
            batch_size=cfg.model_batch,
            learning_rate=cfg.model_lr,
        )
        world.surrogate = train_source_classifier(source, surr_cfg, derive_seed(cfg.seed, "surrogate"))

    if with_encoder:
        pairs = make_pairs(source, derive_seed(cfg.seed, "pairs"), cfg.pair_count, cfg.pair_balance)
        enc_cfg = encmod.EncoderConfig(
            hidden=(cfg.encoder_hidden,),
            embed_dim=cfg.embed_dim,
            margin=cfg.margin,
            epochs=cfg.encoder_epochs,
            batch_size=cfg.encoder_batch,
            learning_rate=cfg.encoder_lr,
            weight_decay=cfg.weight_decay,
        )
        world.encoder = encmod.train_encoder(pairs, enc_cfg, derive_seed(cfg.seed, "encoder"))
        benign = build_benign_dataset(cfg)
        world.threshold = det.calibrate_threshold(
            world.encoder, benign, cfg.k, cfg.target_fpr, derive_seed(cfg.seed, "calibrate")
        )
        world.achieved_fpr = det.measure_noreset_fpr(
            world.encoder, benign, cfg.k, world.threshold, derive_seed(cfg.seed, "fpr-check")
        )
    return world


@dataclass
class ScenarioReport:
    kind: str
    columns: list
    rows: list
    extras: dict = field(default_factory=dict)


def _fmt_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(report: ScenarioReport, path=None, fmt: str = "csv"):
    """Write the report as CSV (fixed header order) or an aligned table.

    Returns the rendered text; writes it to ``path`` when given.
    """
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(report.columns)
        for row in report.rows:
            writer.writerow([_fmt_value(row[c]) for c in report.columns])
        text = buf.getvalue()
    elif fmt == "console-table":
        cells = [[str(c) for c in report.columns]]
        for row in report.rows:
            cells.append(
                [f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in report.columns]
            )
        widths = [max(len(line[i]) for line in cells) for i in range(len(report.columns))]
        lines = ["  ".join(cell.rjust(w) for cell, w in zip(line, widths)) for line in cells]
        text = "\n".join(lines) + "\n"
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text


def _attack_row_stats(observer: det.StatefulDetector | None, accounts, k: int):
    if observer is None:
        return 0, 0.0
    detections = sum(observer.detections_for(a) for a in accounts)
    queries = sum(observer.queries_for(a) for a in accounts)
    if queries == 0:
        return 0, 0.0
    return detections, det.stats(detections, k, queries).normalized_rate


def _account_list(cfg: ScenarioConfig):
    return [f"attacker-{i}" for i in range(cfg.accounts)]


def run_whitebox(world: World, train_ds=None, test_ds=None, epochs=None, tag="whitebox", model=None):
    cfg = world.cfg
    model = model or world.clf
    train_ds = train_ds if train_ds is not None else world.train_ds
    test_ds = test_ds if test_ds is not None else world.test_ds
    prog, curve = rp.whitebox_reprogram(
        model,
        train_ds,
        world.mapping,
        world.spec,
        step_size=cfg.step_size,
        epochs=cfg.attack_epochs if epochs is None else epochs,
        batch_size=cfg.attack_batch,
        seed=derive_seed(cfg.seed, tag),
        gamma=cfg.gamma,
        raw_update=cfg.raw_update,
    )
    acc = rp.reprogram_accuracy(prog, test_ds, world.mapping, model, world.spec)
    return prog, acc, curve


def run_blackbox(
    world: World,
    directions: int,
    with_detector: bool,
    train_ds=None,
    test_ds=None,
    epochs=None,
    tag="blackbox",
    init_weights=None,
    trace=None,
    keep_log=False,
):
    """One black-box attack row; returns (prog, acc, budget, observer, curve)."""
    cfg = world.cfg
    train_ds = train_ds if train_ds is not None else world.train_ds
    test_ds = test_ds if test_ds is not None else world.test_ds
    observer = det.StatefulDetector(world.detector_config(), keep_log=keep_log) if with_detector else None
    channel = QueryChannel(world.clf, observer=observer)
    zo_cfg = zo.ZOConfig(
        directions=directions,
        smoothing=cfg.smoothing,
        scale=cfg.scale,
        mask_directions=cfg.mask_directions,
    )
    prog, budget, curve = zo.blackbox_reprogram(
        channel,
        _account_list(cfg),
        train_ds,
        world.mapping,
        world.spec,
        zo_cfg,
        step_size=cfg.step_size,
        epochs=cfg.attack_epochs if epochs is None else epochs,
        batch_size=cfg.attack_batch,
        seed=derive_seed(cfg.seed, tag),
        gamma=cfg.gamma,
        raw_update=cfg.raw_update,
        init_weights=init_weights,
        trace=trace,
    )
    acc = rp.reprogram_accuracy(prog, test_ds, world.mapping, world.clf, world.spec)
    return prog, acc, budget, observer, curve


TABLE3_COLUMNS = ["seed", "tr", "ts", "whitebox_acc", "blackbox_acc", "gap"]
TABLE4_COLUMNS = ["seed", "q", "blackbox_acc", "queries", "sweep_queries", "detections", "k", "norm_detection_rate"]
TABLE5_COLUMNS = [
    "seed",
    "surrogate_acc",
    "q",
    "blackbox_acc",
    "queries",
    "sweep_queries",
    "detections",
    "k",
    "norm_detection_rate",
]


def table3_rows(world: World) -> list:
    cfg = world.cfg
    rows = []
    for tr in cfg.tr_sizes:
        train_ds, _ = gen_target_split(cfg, train_count=tr)
        _, wb_acc, _ = run_whitebox(
            world, train_ds=train_ds, epochs=cfg.table3_epochs, tag=f"table3-wb-{tr}"
        )
        _, bb_acc, _, _, _ = run_blackbox(
            world,
            cfg.table3_directions,
            with_detector=False,
            train_ds=train_ds,
            epochs=cfg.table3_epochs,
            tag=f"table3-bb-{tr}",
        )
        rows.append(
            {
                "seed": cfg.seed,
                "tr": tr,
                "ts": len(world.test_ds),
                "whitebox_acc": wb_acc,
                "blackbox_acc": bb_acc,
                "gap": wb_acc - bb_acc,
            }
        )
    return rows


def run_table3_analog(cfg: ScenarioConfig) -> ScenarioReport:
    world = build_world(cfg, with_encoder=False)
    return ScenarioReport("table3-analog", TABLE3_COLUMNS, table3_rows(world))


def table4_rows(world: World, q_values=None) -> list:
    cfg = world.cfg
    rows = []
    for q in q_values if q_values is not None else cfg.q_grid:
        _, acc, budget, observer, _ = run_blackbox(
            world, q, with_detector=True, tag=f"table4-q{q}"
        )
        detections, sigma = _attack_row_stats(observer, _account_list(cfg), cfg.k)
        rows.append(
            {
                "seed": cfg.seed,
                "q": q,
                "blackbox_acc": acc,
                "queries": budget.queries,
                "sweep_queries": (q + 1) * len(world.test_ds),
                "detections": detections,
                "k": cfg.k,
                "norm_detection_rate": sigma,
            }
        )
    return rows


def run_table4_analog(cfg: ScenarioConfig) -> ScenarioReport:
    world = build_world(cfg)
    report = ScenarioReport("table4-analog", TABLE4_COLUMNS, table4_rows(world))
    report.extras = {"threshold": world.threshold, "achieved_fpr": world.achieved_fpr}
    return report


def table5_rows(world: World) -> list:
    cfg = world.cfg
    if world.surrogate is None:
        raise ConfigError("table5 analog needs a surrogate model in the world")
    surr_prog, _, _ = run_whitebox(world, tag="table5-surrogate", model=world.surrogate)
    surr_acc = rp.reprogram_accuracy(surr_prog, world.test_ds, world.mapping, world.surrogate, world.spec)
    rows = []
    for q in cfg.finetune_q_grid:
        _, acc, budget, observer, _ = run_blackbox(
            world,
            q,
            with_detector=True,
            epochs=cfg.finetune_epochs,
            tag=f"table5-q{q}",
            init_weights=surr_prog.weights,
        )
        detections, sigma = _attack_row_stats(observer, _account_list(cfg), cfg.k)
        rows.append(
            {
                "seed": cfg.seed,
                "surrogate_acc": surr_acc,
                "q": q,
                "blackbox_acc": acc,
                "queries": budget.queries,
                "sweep_queries": (q + 1) * len(world.test_ds),
                "detections": detections,
                "k": cfg.k,
                "norm_detection_rate": sigma,
            }
        )
    return rows


def run_table5_analog(cfg: ScenarioConfig) -> ScenarioReport:
    world = build_world(cfg, with_surrogate=True)
    report = ScenarioReport("table5-analog", TABLE5_COLUMNS, table5_rows(world))
    report.extras = {"threshold": world.threshold, "achieved_fpr": world.achieved_fpr}
    return report


CALIBRATION_COLUMNS = ["k", "target_fpr", "threshold", "achieved_fpr"]


def run_calibration(cfg: ScenarioConfig) -> ScenarioReport:
    world = build_world(cfg)
    rows = [
        {
            "k": cfg.k,
            "target_fpr": cfg.target_fpr,
            "threshold": world.threshold,
            "achieved_fpr": world.achieved_fpr,
        }
    ]
    return ScenarioReport("calibrate", CALIBRATION_COLUMNS, rows)


def run_unit_checks(cfg: ScenarioConfig | None = None) -> ScenarioReport:
    rows = [
        {"check": name, "passed": int(ok), "detail": detail}
        for name, ok, detail in run_selftest()
    ]
    return ScenarioReport("unit", ["check", "passed", "detail"], rows)


SCENARIO_RUNNERS = {
    "table3-analog": run_table3_analog,
    "table4-analog": run_table4_analog,
    "table5-analog": run_table5_analog,
    "calibrate": run_calibration,
    "unit": run_unit_checks,
}


def run_scenario(cfg: ScenarioConfig) -> ScenarioReport:
    try:
        runner = SCENARIO_RUNNERS[cfg.scenario]
    except KeyError:
        raise ConfigError(f"scenario {cfg.scenario!r} has no runner")
    return runner(cfg)


def run_selftest() -> list:
    """Fast internal checks; returns (name, passed, detail) triples."""
    import os
    import tempfile

    from . import numkernel as nk
    from .fileio import load_weights, save_weights

    results = []

    def check(name, fn):
        try:
            fn()
            results.append((name, True, ""))
        except Exception as e:  # a selftest must report, not crash
            results.append((name, False, f"{type(e).__name__}: {e}"))

    def metric_arithmetic():
        for d, q, expected in ((1810, 110400, 83.61), (980, 51480, 97.09)):
            got = det.stats(d, 50, q).normalized_rate * 100
            if abs(got - expected) > 0.01:
                raise AssertionError(f"sigma* {got:.4f} != {expected}")

    def detector_replay():
        identity = encmod.SimilarityEncoder(nk.FeedforwardNet([], (2,)), margin=1.0)
        cfg = det.DetectorConfig(k=3, threshold=0.5, encoder=identity)
        state = det.DetectorState(2)
        verdicts = [det.observe(state, cfg, np.zeros(2)) for _ in range(4)]
        if verdicts != ["pass", "pass", "pass", "flagged"] or state.size != 0:
            raise AssertionError(f"verdicts {verdicts}, buffer {state.size}")

    def gradient_check():
        rng = np.random.default_rng(7)
        net = nk.FeedforwardNet(
            [
                nk.Affine.init((5,), 4, rng),
                nk.TanhActivation((4,)),
                nk.Affine.init((4,), 3, rng),
                nk.Softmax((3,)),
            ],
            (5,),
        )
        err = nk.finite_diff_check(net, rng.normal(size=5))
        if err > 1e-6:
            raise AssertionError(f"gradient error {err:.2e}")

    def weights_roundtrip():
        rng = np.random.default_rng(8)
        items = [("a", rng.normal(size=(3, 4))), ("b", rng.normal(size=7))]
        fd, path = tempfile.mkstemp(suffix=".rpgw")
        os.close(fd)
        try:
            save_weights(path, items)
            loaded = load_weights(path)
            for name, arr in items:
                if not np.array_equal(loaded[name], arr):
                    raise AssertionError(f"tensor {name} did not round-trip")
        finally:
            os.unlink(path)

    def estimator_zero():
        cfg = zo.ZOConfig(directions=8)
        g = zo.estimate_gradient_from_losses(
            lambda rows: np.zeros(len(rows)), np.zeros(6), cfg, np.random.default_rng(9)
        )
        if np.any(g != 0.0):
            raise AssertionError("constant loss must give a zero estimate")

    def reparameterization_identity():
        rng = np.random.default_rng(10)
        w = rng.normal(size=(4, 4, 2))
        m = (rng.random((4, 4, 2)) < 0.5).astype(float)
        if np.max(np.abs(np.tanh(w * m) - np.tanh(w) * m)) > 1e-15:
            raise AssertionError("tanh/mask identity violated")

    check("detection metric arithmetic", metric_arithmetic)
    check("detector replay", detector_replay)
    check("gradient finite-difference check", gradient_check)
    check("weights file round-trip", weights_roundtrip)
    check("zero-loss estimator", estimator_zero)
    check("program reparameterization identity", reparameterization_identity)
    return results
