"""Command line: ``casnet generate | train | suite | export-maps``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from casnet.backbone import SharingNetwork, load_checkpoint, save_checkpoint
from casnet.data import generate_synthetic, save_dataset
from casnet.errors import ConfigError, DataFormatError, ShapeError
from casnet.metrics import MetricReport
from casnet.train import DataConfig, TrainConfig, TrainingDiverged, desk_config, make_datasets, train

log = logging.getLogger("casnet")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: TrainConfig, pairs: list[str]) -> TrainConfig:
    """Apply ``key=value`` overrides; ``data.<field>`` reaches the data block."""
    d = cfg.to_dict()
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not key=value")
        target = d
        *parents, leaf = key.split(".")
        for p in parents:
            if not isinstance(target.get(p), dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a config block")
            target = target[p]
        if leaf not in target:
            raise ConfigError(f"override {key!r}: unknown field {leaf!r}")
        target[leaf] = _parse_value(value)
    return TrainConfig.from_dict(d)


def load_config(path, overrides) -> TrainConfig:
    cfg = TrainConfig.from_file(path) if path else desk_config()
    return apply_overrides(cfg, overrides or [])


def cmd_generate(args) -> int:
    ds = generate_synthetic(args.n, correlation=args.correlation, noise=args.noise, seed=args.seed,
                            size=(args.height, args.width))
    out = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} images with {len(ds.names)} attributes to {out}")
    return 0


def _print_table(rows: list[tuple[str, MetricReport]]):
    print(MetricReport.header())
    for run_id, rep in rows:
        print(rep.to_row(run_id))


def cmd_train(args) -> int:
    from casnet import plots

    cfg = load_config(args.config, args.set)
    if args.data:
        cfg = cfg.with_(data=replace(cfg.data, path=str(args.data)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")

    def progress(e):
        log.info("epoch %d  lr %.4g  loss %.4f / %.4f  val F1 %.4f  mA %.4f",
                 e.epoch, e.lr, e.train_loss_a, e.train_loss_b, e.val["f1"], e.val["mA"])

    record, net = train(cfg, make_datasets(cfg.data), progress=progress)
    record.save(out / "run.json")
    save_checkpoint(net, out / "checkpoint.npz")
    run_id = args.run_id or cfg.sharing_kind
    with open(out / "results.csv", "w") as fh:
        fh.write(MetricReport.header() + "\n" + record.test_report.to_row(run_id) + "\n")
    plots.plot_training(record, out / "training.png")
    _print_table([(run_id, record.test_report)])
    return 0


def cmd_suite(args) -> int:
    from casnet.suite import read_runs, run_suite

    cfg = load_config(args.config, args.set)
    seeds = [int(s) for s in args.seeds.split(",")]

    def progress(run_id, record):
        log.info("%s  test F1 %.4f  (%.0fs)", run_id, record.test["f1"], record.wall_time)

    summary = run_suite(args.name, cfg, seeds, args.out, progress=progress)
    _print_table(read_runs(Path(args.out) / "runs.csv"))
    print()
    for row in summary:
        print(f"{row['variant']},runs={row['runs']},failed={row['failed']},"
              f"f1={row['f1_mean']:.4f}+-{row['f1_std']:.4f},mA={row['mA_mean']:.4f}+-{row['mA_std']:.4f}")
    return 0 if all(r["failed"] == 0 for r in summary) else 3


def cmd_export_maps(args) -> int:
    from casnet import plots
    from casnet.maps import collect_maps, export_attention_maps

    net = load_checkpoint(args.checkpoint)
    if not isinstance(net, SharingNetwork) or not net.has_cas:
        raise ConfigError(f"{args.checkpoint}: network has no co-attentive unit")
    if args.data:
        dc = DataConfig(path=str(args.data), height=args.height, width=args.width)
    else:
        cfg = load_config(args.config, [])
        dc = cfg.data
    parts = dict(zip(("train", "val", "test"), make_datasets(dc)))
    ds = parts[args.split]
    idx = list(range(min(args.limit, len(ds))))
    paths = export_attention_maps(net, ds, args.out, indices=idx)
    if idx:
        plots.plot_maps(ds.images[0], [(k, a[0], b[0]) for k, a, b in collect_maps(net, ds.images[:1])],
                        Path(args.out) / f"{ds.ids[0]}_maps.png")
    print(f"wrote {len(paths)} maps for {len(idx)} {args.split} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="casnet", description="Two-stream multi-task attribute networks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset to disk")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=2500)
    g.add_argument("--correlation", type=float, default=0.4)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=32)
    g.set_defaults(func=cmd_generate)

    for name, func, help_ in (("train", cmd_train, "train one network"),
                              ("suite", cmd_suite, "run an experiment sweep")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with TrainConfig fields (default: desk schedule)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
    sub.choices["train"].add_argument("--data", help="dataset directory written by 'generate'")
    sub.choices["train"].add_argument("--run-id", help="row label in results.csv")
    sub.choices["suite"].add_argument("name", choices=("baselines", "ablations", "grouping", "reduction",
                                                       "integration"))
    sub.choices["suite"].add_argument("--seeds", default="0,1,2,3,4")

    e = sub.add_parser("export-maps", help="write attention maps of a trained network as PGM files")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="config whose data block regenerates the dataset")
    e.add_argument("--data", help="dataset directory written by 'generate'")
    e.add_argument("--height", type=int, default=64)
    e.add_argument("--width", type=int, default=32)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--limit", type=int, default=16)
    e.set_defaults(func=cmd_export_maps)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, ShapeError, TrainingDiverged, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
