"""Command-line entry point: ``percept-age <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 unsupported operation,
4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import architecture as arch
from .dataset import (
    ANNOTATION_FILE,
    Gender,
    Happiness,
    Makeup,
    Observer,
    Race,
    Split,
    SyntheticSpec,
    AnnotationRecord,
    encode_attributes,
    generate_synthetic,
    load_annotations,
    load_dataset,
    load_image,
    write_dataset,
)
from .evaluation import PredictionSet, build_report, emit_report, observer_eval
from .experiments import desk_config, predict_samples, run_case_ordering
from .training import TrainConfig, config_for, run_case

EXIT_OK, EXIT_CONFIG, EXIT_UNSUPPORTED, EXIT_IO = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class Unsupported(Exception):
    pass


RUN_CONFIG_KEYS = {"synthetic", "variant", "scale", "train", "paths", "stacked_attribute_encoder"}


def load_run_config(path) -> dict:
    """Read a RunConfig JSON document; unknown top-level keys are rejected."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(doc) - RUN_CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return doc


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config)
    syn = dict(cfg.get("synthetic", {}))
    if args.n is not None:
        syn["sample_count"] = args.n
    if args.seed is not None:
        syn["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_dict(syn)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None
    samples = generate_synthetic(spec)
    out = write_dataset(samples, args.out, spec)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _train_config(cfg: dict, args, variant: arch.ModelVariant) -> TrainConfig:
    overrides = dict(cfg.get("train", {}))
    flag_map = {
        "seed": args.seed, "lr_stage1": args.lr, "lr_stage2": args.lr2,
        "max_epochs_stage1": args.max_epochs1, "max_epochs_stage2": args.max_epochs2,
        "patience": args.patience, "batch_size": args.batch_size, "target_label": args.target,
    }
    overrides.update({k: v for k, v in flag_map.items() if v is not None})
    try:
        return config_for(variant, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from None


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    try:
        variant = arch.ModelVariant(args.variant or cfg.get("variant", "case3"))
        scale = arch.Scale(args.scale or cfg.get("scale", "desk"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if scale is arch.Scale.FULL:
        raise Unsupported("training at full scale is not supported: no pretrained VGG16 weights are bundled, "
                          "and a randomly initialised 224x224 VGG16 is impractical to train on CPU; "
                          "use 'params' for full-scale parameter accounting")
    data_dir = args.data or cfg.get("paths", {}).get("data")
    out_dir = args.out or cfg.get("paths", {}).get("out")
    if not data_dir or not out_dir:
        raise ConfigError("--data and --out are required")
    stacked = bool(args.stacked_attribute_encoder or cfg.get("stacked_attribute_encoder", False))
    config = _train_config(cfg, args, variant)
    samples = load_dataset(data_dir)
    ckpt, train_log = run_case(variant, samples, config, scale, stacked)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arch.save_params(ckpt.params, out / "checkpoint", {**ckpt.metadata(), "config": config.to_dict()})
    train_log.to_csv(out / "train_log.csv")
    _write_json(out / "resolved_config.json", {
        "variant": variant.value, "scale": scale.value, "stacked_attribute_encoder": stacked,
        "train": config.to_dict(), "paths": {"data": str(data_dir), "out": str(out_dir)},
    })
    print(f"best checkpoint: stage {ckpt.stage}, epoch {ckpt.epoch}, validation MAE {ckpt.val_mae:.3f} years")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, _ = arch.load_params(args.checkpoint)
    split = Split(args.split)
    samples = load_dataset(args.data, split)
    if not samples:
        raise ConfigError(f"no samples in split {split.value!r}")
    train_records = load_annotations(Path(args.data) / ANNOTATION_FILE, Split.TRAIN)
    records = [s.record for s in samples]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    observer = None
    if params.variant is arch.ModelVariant.CASE3_OBSERVER:
        per_obs = {g: predict_samples(params, samples, g) for g in Observer}
        for g, p in per_obs.items():
            p.to_csv(out / f"predictions_observer_{g.value}.csv")
        ids = per_obs[Observer.FEMALE].image_ids
        preds = PredictionSet(ids, (per_obs[Observer.FEMALE].apparent_pred + per_obs[Observer.MALE].apparent_pred) / 2,
                              (per_obs[Observer.FEMALE].real_pred + per_obs[Observer.MALE].real_pred) / 2)
        if all(r.apparent_by_observer is not None for r in records):
            observer = observer_eval({g: p.apparent_pred for g, p in per_obs.items()}, records)
    else:
        preds = predict_samples(params, samples)
    preds.to_csv(out / "predictions.csv")
    report = build_report(preds, records, train_records, observer)
    emit_report(report, out)
    print(f"test MAE: apparent {report.mae_apparent:.3f}, real {report.mae_real:.3f} (n={report.n})")
    if observer is not None:
        for g in observer.matched:
            print(f"observer {g}: MAE {observer.matched[g]:.3f} (cross-matched {observer.cross[g]:.3f})")
    return EXIT_OK


def cmd_analyze(args) -> int:
    preds = PredictionSet.from_csv(args.predictions)
    annotations = load_annotations(args.annotations)
    wanted = set(preds.image_ids)
    records = [r for r in annotations if r.image_id in wanted]
    if len(records) != len(wanted):
        raise ConfigError("some predictions have no matching annotation")
    train_records = [r for r in annotations if r.split is Split.TRAIN]
    report = build_report(preds, records, train_records)
    emit_report(report, args.out)
    print(f"MAE: apparent {report.mae_apparent:.3f}, real {report.mae_real:.3f} (n={report.n})")
    return EXIT_OK


def cmd_params(args) -> int:
    spec = arch.build_spec(args.variant, args.scale, args.stacked_attribute_encoder)
    print(arch.count_trainable_params(spec))
    return EXIT_OK


def cmd_predict(args) -> int:
    params, _ = arch.load_params(args.checkpoint)
    pixels = load_image(args.image)
    variant = params.variant
    attrs = None
    if variant.uses_attributes:
        missing = [k for k in ("gender", "race", "happiness", "makeup") if getattr(args, k) is None]
        if missing:
            raise ConfigError(f"{variant.value} needs --{' --'.join(missing)}")
        rec = AnnotationRecord("query", 0.0, 0.0, 0.0, Gender(args.gender), Race(args.race),
                               Happiness(args.happiness), Makeup(args.makeup))
        observer = None
        if variant is arch.ModelVariant.CASE3_OBSERVER:
            if args.observer is None:
                raise ConfigError("observer-conditioned model needs --observer female|male")
            observer = Observer(args.observer)
        elif args.observer is not None:
            raise Unsupported(f"{variant.value} was not trained with observer gender")
        attrs = encode_attributes(rec, observer)
    out = arch.forward(params, pixels, attrs)
    print(f"apparent_age: {out.apparent_pred[0]:.2f}")
    if out.real_pred is not None:
        print(f"real_age: {out.real_pred[0]:.2f}")
    return EXIT_OK


def cmd_repro_case_ordering(args) -> int:
    config = desk_config()
    if args.quick:
        config = desk_config(max_epochs_stage1=3, max_epochs_stage2=3)
    result = run_case_ordering(args.seeds, config)
    print(result.table())
    return EXIT_OK if all(result.passed().values()) else 1


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="percept-age", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="per-epoch log lines")
    sub = p.add_subparsers(dest="command", required=True)
    variants = [v.value for v in arch.ModelVariant]
    scales = [s.value for s in arch.Scale]

    s = sub.add_parser("synth", help="generate a synthetic dataset directory")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="two-stage training of one case study")
    s.add_argument("--config")
    s.add_argument("--variant", choices=variants)
    s.add_argument("--scale", choices=scales)
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float, help="stage-1 learning rate")
    s.add_argument("--lr2", type=float, help="stage-2 learning rate (default: stage-1 value)")
    s.add_argument("--max-epochs1", type=int)
    s.add_argument("--max-epochs2", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--target", choices=["apparent", "real", "dual"])
    s.add_argument("--stacked-attribute-encoder", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", choices=[x.value for x in Split])
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", help="attribute tables and error curves from a predictions CSV")
    s.add_argument("--predictions", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("params", help="print the trainable parameter count")
    s.add_argument("--variant", required=True, choices=variants)
    s.add_argument("--scale", default="full", choices=scales)
    s.add_argument("--stacked-attribute-encoder", action="store_true")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("predict", help="predict ages for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--gender", choices=[x.value for x in Gender])
    s.add_argument("--race", choices=[x.value for x in Race])
    s.add_argument("--happiness", choices=[x.value for x in Happiness])
    s.add_argument("--makeup", choices=[x.value for x in Makeup])
    s.add_argument("--observer", choices=[x.value for x in Observer])
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("repro_case_ordering", help="seed sweep of the case-ordering experiment")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    s.add_argument("--quick", action="store_true", help="tiny epoch budget (smoke run)")
    s.set_defaults(func=cmd_repro_case_ordering)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Unsupported as exc:
        print(f"unsupported: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
