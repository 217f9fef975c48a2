"""Command-line entry point: synth, train, eval, gradcheck, benchmark.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import checks, dataio, models, segmetrics, trainer
from .dataio import DataError, SampleSet
from .models import CheckpointError, ModelConfig
from .tensorcore import MAX_STEP, MIN_STEP, ShapeError
from .trainer import NumericError, TrainConfig

log = logging.getLogger("dr2unet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# values used when neither the config file nor the data pins them
CLI_DEFAULTS = {"depth": 2, "base_width": 8, "epochs": 30}
DISPLAY = {"unet": "U-Net", "resunet": "ResUNet", "dense_r2unet": "Dense R2UNet"}
REFERENCE_NOTE = (
    "Reference (LUNA lung CT, full-scale training, not reproduced here): "
    "Dense R2UNet DSC 0.981 ± 0.009, accuracy 0.991 ± 0.003."
)


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# config


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


MODEL_KEYS = _field_names(ModelConfig) - {"seed"}
TRAIN_KEYS = _field_names(TrainConfig) - {"seed"}
SEED_KEYS = {"seed", "model_seed", "train_seed", "split_seed"}


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - MODEL_KEYS - TRAIN_KEYS - SEED_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return raw


def make_configs(raw: dict, variant: str | None, input_size) -> tuple[ModelConfig, TrainConfig, int]:
    """Flat config dict -> (ModelConfig, TrainConfig, split seed).

    ``seed`` seeds everything; ``model_seed``/``train_seed``/``split_seed`` override it.
    """
    merged = {**CLI_DEFAULTS, **raw}
    seed = int(merged.get("seed", 0))
    mkw = {k: v for k, v in merged.items() if k in MODEL_KEYS}
    if variant is not None:
        mkw["variant"] = variant
    mkw.setdefault("input_size", input_size)
    mkw["seed"] = int(merged.get("model_seed", seed))
    tkw = {k: v for k, v in merged.items() if k in TRAIN_KEYS}
    tkw["seed"] = int(merged.get("train_seed", seed))
    try:
        mcfg, tcfg = ModelConfig(**mkw), TrainConfig(**tkw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return mcfg, tcfg, int(merged.get("split_seed", seed))


# data helpers


def _dataset_and_split(data_dir, split_seed: int) -> tuple[SampleSet, dataio.SplitIndices]:
    ds = dataio.load_dataset(data_dir)
    sp = dataio.load_split(data_dir)
    if sp is None:
        sp = dataio.split(ds.ids, seed=split_seed)
    known = set(ds.ids)
    for k in sp.train + sp.val + sp.test:
        if k not in known:
            raise DataError(f"split.json names unknown sample {k!r}")
    return ds, sp


def _input_size(ds: SampleSet) -> tuple[int, int]:
    sizes = {im.shape[2:] for im in ds.images}
    if len(sizes) != 1:
        raise DataError(f"samples differ in size: {sorted(sizes)}; resize them first")
    return tuple(sizes.pop())


def _per_sample_rows(model, ds: SampleSet, threshold: float = 0.5) -> list[dict]:
    rows = []
    for sid, x, y in zip(ds.ids, ds.images, ds.masks):
        row = segmetrics.sample_metrics(models.predict(model, x), y, threshold)
        row["id"] = sid
        rows.append(row)
    return rows


def _write_metrics_csv(rows: list[dict], agg: segmetrics.MetricsRow, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *segmetrics.METRICS])
        for r in rows:
            w.writerow([r["id"], *(repr(r[k]) for k in segmetrics.METRICS)])
        w.writerow(["mean", *(repr(agg.mean[k]) for k in segmetrics.METRICS)])
        w.writerow(["std", *(repr(agg.std[k]) for k in segmetrics.METRICS)])


def _train_one(mcfg, tcfg, ds, sp, out: Path, tag: str = ""):
    model = models.build(mcfg)
    log.info("training %s (%d parameters) for %d epochs", mcfg.variant, model.count_params(), tcfg.epochs)
    model, records = trainer.train(model, ds.subset(sp.train), ds.subset(sp.val), tcfg)
    models.save(model, out / f"model{tag}.ckpt")
    trainer.write_curves_csv(records, out / f"curves{tag}.csv")
    trainer.write_curves_svg(records, out / f"curves{tag}.svg")
    return model, records


# commands


def cmd_synth(args) -> int:
    if args.size % 4:
        log.warning("size %d is not divisible by 4; depth-2 models will reject it", args.size)
    ds = dataio.synth_generate(args.n, args.size, args.seed)
    out = Path(args.out)
    try:
        dataio.save_dataset(ds, out)
        (out / "split.json").write_text(dataio.split(ds.ids, seed=args.seed).to_json() + "\n")
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from None
    print(f"wrote {len(ds)} samples of {args.size}x{args.size} to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    raw = load_config(args.config)
    ds_probe = dataio.load_dataset(args.data)
    mcfg, tcfg, split_seed = make_configs(raw, args.model, _input_size(ds_probe))
    ds, sp = _dataset_and_split(args.data, split_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(
        {"model": mcfg.to_dict(), "train": trainer.as_dict(tcfg), "split_seed": split_seed}, indent=1) + "\n")
    model, records = _train_one(mcfg, tcfg, ds, sp, out)
    last = records[-1] if records else None
    if last is not None:
        print(f"{mcfg.variant}: {len(records)} epochs, loss {last.train_loss:.4f}, "
              f"train dice {last.train_dice:.4f}, val dice {last.val_dice:.4f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DataError(f"checkpoint {ckpt} not found")
    model = models.load(ckpt)
    # without split.json, reuse the split seed recorded by train when it is available
    split_seed = model.config.seed
    run_cfg = ckpt.parent / "config.json"
    if run_cfg.is_file():
        split_seed = int(json.loads(run_cfg.read_text()).get("split_seed", split_seed))
    ds, sp = _dataset_and_split(args.data, split_seed)
    ids = ds.ids if args.split == "all" else getattr(sp, args.split)
    if not ids:
        raise DataError(f"split {args.split!r} is empty")
    subset = ds.subset(ids)
    if _input_size(subset) != tuple(model.config.input_size):
        raise DataError(f"data size {_input_size(subset)} does not match checkpoint input size "
                        f"{tuple(model.config.input_size)}")
    rows = _per_sample_rows(model, subset)
    agg = segmetrics.aggregate(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics_csv(rows, agg, out / "metrics.csv")
    for k, h in zip(segmetrics.METRICS, segmetrics.HEADERS):
        print(f"{h:<12s} {agg.cell(k)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if not MIN_STEP <= args.step <= MAX_STEP:
        raise ConfigError(f"--step must lie in [{MIN_STEP}, {MAX_STEP}]")
    names = list(checks.CASES) if args.block == "all" else [args.block]
    worst_name, worst_err, ok = None, -1.0, True
    t0 = time.perf_counter()
    for name in names:
        rep = checks.run(name, args.seed, args.step)
        print(f"[{name}]")
        for line in rep.lines():
            print("  " + line)
        tensor, err = rep.worst()
        if err > worst_err:
            worst_name, worst_err = f"{name}:{tensor}", err
        ok = ok and rep.passed
    print(f"worst: {worst_name} {worst_err:.3e} ({time.perf_counter() - t0:.1f}s)")
    if not ok:
        print(f"gradcheck FAILED: {worst_name} relative error {worst_err:.3e} >= 1e-4", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    raw = load_config(args.config)
    if "variant" in raw:
        raise ConfigError("benchmark trains every variant; drop 'variant' from the config")
    ds_probe = dataio.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, params = {}, {}
    for variant in models.VARIANTS:
        mcfg, tcfg, split_seed = make_configs(raw, variant, _input_size(ds_probe))
        ds, sp = _dataset_and_split(args.data, split_seed)
        if not sp.test:
            raise DataError("test split is empty")
        model, _ = _train_one(mcfg, tcfg, ds, sp, out, tag=f"_{variant}")
        per = _per_sample_rows(model, ds.subset(sp.test))
        agg = segmetrics.aggregate(per)
        _write_metrics_csv(per, agg, out / f"metrics_{variant}.csv")
        rows[DISPLAY[variant]] = agg
        params[DISPLAY[variant]] = model.count_params()
    md, table_csv = segmetrics.report_table(rows, params)
    md += "\n" + REFERENCE_NOTE + "\n"
    (out / "table.md").write_text(md)
    (out / "table.csv").write_text(table_csv)
    ratio = params["Dense R2UNet"] / params["U-Net"]
    print(md)
    print(f"parameter ratio Dense R2UNet / U-Net: {ratio:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dr2unet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic lesion dataset")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model variant")
    s.add_argument("--model", choices=["unet", "resunet", "dense-r2unet"],
                   help="variant; overrides the config's 'variant' (default dense-r2unet)")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the tape gradients")
    s.add_argument("--block", choices=[*checks.CASES, "all"], default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--step", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("benchmark", help="train and compare all three variants")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
