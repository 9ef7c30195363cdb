"""Command-line entry point.

Exit codes: 0 success, 2 configuration/input error, 3 numeric failure.
Every config key is overridable with a flag of the same name; all commands
except selftest require --seed.
"""

from __future__ import annotations

import argparse
import csv
import sys

from . import detector as det
from . import encoder as encmod
from . import harness
from . import reprogram as rp
from .config import CONFIG_LAYOUT, load_config
from .data import PaddingSpec, load_dataset, make_pairs, save_dataset
from .errors import (
    AttackAbortedError,
    ConfigError,
    FormatError,
    InvariantError,
    NumericError,
    ShapeError,
    UndefinedStatError,
)
from .models import (
    ClassifierConfig,
    load_classifier,
    save_classifier,
    train_source_classifier,
    train_source_classifier_with_log,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_config_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("config overrides")
    for section, keys in CONFIG_LAYOUT.items():
        for key in keys:
            if key == "seed":
                continue
            group.add_argument(f"--{key}", metavar=section.upper(), default=None)


def _base_parser(sub, name, help_text, needs_seed=True):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--seed", type=int, required=needs_seed, help="run seed")
    _add_config_flags(p)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reprosim")
    sub = parser.add_subparsers(dest="command", required=True)

    p = _base_parser(sub, "gen-data", "generate a synthetic dataset file")
    p.add_argument("--kind", choices=("source", "target", "benign"), required=True)
    p.add_argument("--out", required=True)

    p = _base_parser(sub, "train-source", "train the source-domain classifier")
    p.add_argument("--data", default=None, help="RPGD dataset (default: generated)")
    p.add_argument("--out", required=True, help="classifier weights file")
    p.add_argument("--log", default=None, help="training log CSV")

    p = _base_parser(sub, "train-encoder", "train the similarity encoder")
    p.add_argument("--data", default=None, help="RPGD source dataset (default: generated)")
    p.add_argument("--out", required=True, help="encoder weights file")
    p.add_argument("--log", default=None, help="training curve CSV")

    p = _base_parser(sub, "calibrate", "calibrate the detection threshold")
    p.add_argument("--encoder", required=True)
    p.add_argument("--data", default=None, help="benign RPGD dataset (default: generated)")
    p.add_argument("--out", default=None, help="calibration report CSV")

    p = _base_parser(sub, "attack-whitebox", "craft a program with full model access")
    p.add_argument("--model", default=None, help="classifier weights (default: trained)")
    p.add_argument("--out", required=True, help="program weights file")
    p.add_argument("--curve", default=None, help="loss curve CSV")
    p.add_argument("--mapping-out", default=None, help="label mapping CSV")

    for name, help_text in (
        ("attack-blackbox", "craft a program through queries only"),
        ("attack-surrogate", "surrogate program plus query fine-tuning"),
    ):
        p = _base_parser(sub, name, help_text)
        p.add_argument("--model", default=None)
        if name == "attack-surrogate":
            p.add_argument("--surrogate-model", default=None)
        p.add_argument("--encoder", default=None, help="detector encoder weights")
        p.add_argument("--threshold", type=float, default=None, help="detection threshold (default: calibrated)")
        p.add_argument("--no-detector", action="store_true")
        p.add_argument("--out", required=True)
        p.add_argument("--trace", default=None, help="attack trace CSV")
        p.add_argument("--detection-log", default=None, help="detector log CSV")

    p = _base_parser(sub, "report", "run a full scenario and emit its report")
    p.add_argument("--out", default=None, help="report CSV path")
    p.add_argument("--format", choices=("csv", "console-table"), default="console-table")

    sub.add_parser("selftest", help="run fast internal checks")
    return parser


def _config_from_args(args) -> "harness.ScenarioConfig":
    overrides = {}
    for keys in CONFIG_LAYOUT.values():
        for key in keys:
            value = getattr(args, key, None)
            if value is not None:
                overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(getattr(args, "config", None), overrides)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _classifier_config(cfg, hidden):
    return ClassifierConfig(
        hidden=(hidden,), epochs=cfg.model_epochs, batch_size=cfg.model_batch, learning_rate=cfg.model_lr
    )


def _encoder_config(cfg):
    return encmod.EncoderConfig(
        hidden=(cfg.encoder_hidden,),
        embed_dim=cfg.embed_dim,
        margin=cfg.margin,
        epochs=cfg.encoder_epochs,
        batch_size=cfg.encoder_batch,
        learning_rate=cfg.encoder_lr,
        weight_decay=cfg.weight_decay,
    )


def _load_or_train_classifier(args, cfg):
    if getattr(args, "model", None):
        return load_classifier(args.model)
    source = harness.build_source_dataset(cfg)
    return train_source_classifier(source, _classifier_config(cfg, cfg.hidden), harness.derive_seed(cfg.seed, "model"))


def _load_or_train_encoder(args, cfg):
    if getattr(args, "encoder", None):
        return encmod.load_encoder(args.encoder)
    source = harness.build_source_dataset(cfg)
    pairs = make_pairs(source, harness.derive_seed(cfg.seed, "pairs"), cfg.pair_count, cfg.pair_balance)
    return encmod.train_encoder(pairs, _encoder_config(cfg), harness.derive_seed(cfg.seed, "encoder"))


def _make_world(args, cfg, with_encoder: bool, with_surrogate: bool = False) -> harness.World:
    clf = _load_or_train_classifier(args, cfg)
    mapping = rp.LabelMapping.consecutive_blocks(cfg.target_classes, cfg.group_size, cfg.source_classes)
    spec = PaddingSpec(inner=cfg.target_size, outer=cfg.image_size, channels=cfg.channels)
    train_ds, test_ds = harness.gen_target_split(cfg)
    world = harness.World(cfg, clf, mapping, spec, train_ds, test_ds)
    if with_surrogate:
        if getattr(args, "surrogate_model", None):
            world.surrogate = load_classifier(args.surrogate_model)
        else:
            source = harness.build_source_dataset(cfg)
            world.surrogate = train_source_classifier(
                source, _classifier_config(cfg, cfg.surrogate_hidden), harness.derive_seed(cfg.seed, "surrogate")
            )
    if with_encoder:
        world.encoder = _load_or_train_encoder(args, cfg)
        if getattr(args, "threshold", None) is not None:
            world.threshold = args.threshold
        else:
            benign = harness.build_benign_dataset(cfg)
            world.threshold = det.calibrate_threshold(
                world.encoder, benign, cfg.k, cfg.target_fpr, harness.derive_seed(cfg.seed, "calibrate")
            )
    return world


def _cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    if args.kind == "source":
        ds = harness.build_source_dataset(cfg)
    elif args.kind == "benign":
        ds = harness.build_benign_dataset(cfg)
    else:
        ds, _ = harness.gen_target_split(cfg)
    save_dataset(args.out, ds)
    print(f"wrote {args.kind} dataset: {len(ds)} samples of {ds.sample_dims} to {args.out}")
    return EXIT_OK


def _cmd_train_source(args) -> int:
    cfg = _config_from_args(args)
    ds = load_dataset(args.data) if args.data else harness.build_source_dataset(cfg)
    clf, log = train_source_classifier_with_log(
        ds, _classifier_config(cfg, cfg.hidden), harness.derive_seed(cfg.seed, "model")
    )
    save_classifier(args.out, clf)
    if args.log:
        _write_csv(args.log, ["epoch", "loss", "accuracy"], [(e, repr(l), repr(a)) for e, l, a in log])
    print(f"trained classifier: holdout accuracy {clf.meta.holdout_accuracy:.4f}, saved to {args.out}")
    return EXIT_OK


def _cmd_train_encoder(args) -> int:
    cfg = _config_from_args(args)
    ds = load_dataset(args.data) if args.data else harness.build_source_dataset(cfg)
    pairs = make_pairs(ds, harness.derive_seed(cfg.seed, "pairs"), cfg.pair_count, cfg.pair_balance)
    enc, log = encmod.train_encoder_with_log(pairs, _encoder_config(cfg), harness.derive_seed(cfg.seed, "encoder"))
    encmod.save_encoder(args.out, enc)
    if args.log:
        _write_csv(args.log, ["epoch", "loss"], [(e, repr(l)) for e, l in log])
    print(f"trained encoder to {args.out} (embedding dim {enc.embed_dim})")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    cfg = _config_from_args(args)
    enc = encmod.load_encoder(args.encoder)
    benign = load_dataset(args.data) if args.data else harness.build_benign_dataset(cfg)
    threshold = det.calibrate_threshold(
        enc, benign, cfg.k, cfg.target_fpr, harness.derive_seed(cfg.seed, "calibrate")
    )
    achieved = det.measure_noreset_fpr(enc, benign, cfg.k, threshold, harness.derive_seed(cfg.seed, "fpr-check"))
    if args.out:
        _write_csv(
            args.out,
            ["k", "target_fpr", "threshold", "achieved_fpr"],
            [[cfg.k, repr(cfg.target_fpr), repr(threshold), repr(achieved)]],
        )
    print(f"k={cfg.k} target_fpr={cfg.target_fpr} threshold={threshold!r} achieved_fpr={achieved!r}")
    return EXIT_OK


def _cmd_attack_whitebox(args) -> int:
    cfg = _config_from_args(args)
    world = _make_world(args, cfg, with_encoder=False)
    prog, acc, curve = harness.run_whitebox(world)
    rp.save_program(args.out, prog)
    if args.curve:
        _write_csv(args.curve, ["epoch", "loss"], [(e, repr(l)) for e, l in curve])
    if args.mapping_out:
        world.mapping.save_csv(args.mapping_out)
    print(f"white-box reprogramming accuracy {acc:.4f}; program saved to {args.out}")
    return EXIT_OK


def _finish_attack(args, cfg, acc, budget, observer, trace_rows, surrogate_acc=None) -> int:
    if args.trace:
        _write_csv(
            args.trace,
            ["query_index", "account", "epoch", "batch", "purpose", "loss"],
            [(i, a, e, b, p, repr(l)) for i, a, e, b, p, l in trace_rows],
        )
    if args.detection_log and observer is not None and observer.log is not None:
        _write_csv(
            args.detection_log,
            ["account", "query_index", "buffer_size_before", "mean_knn_distance", "verdict"],
            [(a, qi, bs, "warmup" if d is None else repr(d), v) for a, qi, bs, d, v in observer.log],
        )
    detections, sigma = harness._attack_row_stats(observer, harness._account_list(cfg), cfg.k)
    extra = f" surrogate_whitebox_acc={surrogate_acc:.4f}" if surrogate_acc is not None else ""
    print(
        f"black-box accuracy {acc:.4f} queries {budget.queries} detections {detections} "
        f"norm_detection_rate {sigma:.4f}{extra}; program saved to {args.out}"
    )
    return EXIT_OK


def _cmd_attack_blackbox(args) -> int:
    cfg = _config_from_args(args)
    with_detector = not args.no_detector
    world = _make_world(args, cfg, with_encoder=with_detector)
    trace_rows: list = []
    trace = trace_rows.append if args.trace else None
    try:
        prog, acc, budget, observer, _ = harness.run_blackbox(
            world, cfg.directions, with_detector=with_detector, tag="blackbox", trace=trace,
            keep_log=bool(args.detection_log),
        )
    except AttackAbortedError as err:
        if err.program is not None:
            rp.save_program(args.out, err.program)
            print(f"attack aborted (all accounts banned); partial program saved to {args.out}", file=sys.stderr)
        raise
    rp.save_program(args.out, prog)
    return _finish_attack(args, cfg, acc, budget, observer, trace_rows)


def _cmd_attack_surrogate(args) -> int:
    cfg = _config_from_args(args)
    with_detector = not args.no_detector
    world = _make_world(args, cfg, with_encoder=with_detector, with_surrogate=True)
    surr_prog, _, _ = harness.run_whitebox(world, tag="table5-surrogate", model=world.surrogate)
    surr_acc = rp.reprogram_accuracy(surr_prog, world.test_ds, world.mapping, world.surrogate, world.spec)
    trace_rows: list = []
    trace = trace_rows.append if args.trace else None
    try:
        prog, acc, budget, observer, _ = harness.run_blackbox(
            world,
            min(cfg.finetune_q_grid),
            with_detector=with_detector,
            epochs=cfg.finetune_epochs,
            tag="finetune",
            init_weights=surr_prog.weights,
            trace=trace,
            keep_log=bool(args.detection_log),
        )
    except AttackAbortedError as err:
        if err.program is not None:
            rp.save_program(args.out, err.program)
            print(f"attack aborted (all accounts banned); partial program saved to {args.out}", file=sys.stderr)
        raise
    rp.save_program(args.out, prog)
    return _finish_attack(args, cfg, acc, budget, observer, trace_rows, surrogate_acc=surr_acc)


def _cmd_report(args) -> int:
    cfg = _config_from_args(args)
    report = harness.run_scenario(cfg)
    if args.out is not None:
        harness.emit_report(report, path=args.out, fmt="csv")
        print(f"wrote {report.kind} report ({len(report.rows)} rows) to {args.out}")
        if args.format == "console-table":
            print(harness.emit_report(report, fmt="console-table"), end="")
    else:
        print(harness.emit_report(report, fmt=args.format), end="")
    for key, value in report.extras.items():
        print(f"# {key} = {value!r}")
    return EXIT_OK


def _cmd_selftest(_args) -> int:
    results = harness.run_selftest()
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
        failed += 0 if ok else 1
    if failed:
        print(f"{failed} of {len(results)} checks failed")
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-source": _cmd_train_source,
    "train-encoder": _cmd_train_encoder,
    "calibrate": _cmd_calibrate,
    "attack-whitebox": _cmd_attack_whitebox,
    "attack-blackbox": _cmd_attack_blackbox,
    "attack-surrogate": _cmd_attack_surrogate,
    "report": _cmd_report,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FormatError, ShapeError, UndefinedStatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, InvariantError, AttackAbortedError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
