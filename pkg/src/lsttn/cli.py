"""``lsttn`` command line: synth, pretrain, train, eval, ablate, plot."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, load_config
from .data import load_synth_spec, save_graph, save_series, synth_generate
from .errors import ConfigError, LSTTNError, NumericError, ParseError, RangeError
from .fusion import VARIANTS
from .metrics import write_ablation
from .training import (
    PreparedData,
    evaluate_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    mst_from_checkpoint,
    normalizer_from_checkpoint,
    predict,
    prepare_data,
    pretrain,
    run_ablation,
    save_checkpoint,
    train_forecast,
)

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("lsttn")


def _load_cfg(args) -> Config:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if getattr(args, "stgnn", None):
        cfg.extractors.stgnn = args.stgnn
    if getattr(args, "ablation", None):
        cfg.extractors.variant = args.ablation
    return cfg.validate()


def _out_dir(args, cfg: Config | None) -> Path:
    out = Path(args.out) if args.out else Path("runs") / (cfg.hash() if cfg else "synth")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(out: Path, args, cfg: Config | None, extra: dict | None = None) -> None:
    meta = {"command": args.command, "version": __version__}
    if cfg is not None:
        meta.update(config_hash=cfg.hash(), seed=cfg.train.seed, config=cfg.to_dict())
    if not args.no_timestamp:
        meta["timestamp"] = datetime.now(timezone.utc).isoformat()
    meta.update(extra or {})
    (out / f"{args.command}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _write_history(path: Path, history: list[dict]) -> None:
    if not history:
        return
    keys = [k for k in history[0] if k != "seconds"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for h in history:
            w.writerow([h[k] for k in keys])


def _pretrained(args, cfg: Config, data: PreparedData, out: Path):
    path = Path(args.pretrained) if getattr(args, "pretrained", None) else out / "pretrain.pt"
    if path.exists():
        return mst_from_checkpoint(load_checkpoint(path), cfg)
    if getattr(args, "pretrained", None):
        raise FileNotFoundError(path)
    log.info("no pretrained encoder at %s; pretraining first", path)
    res = pretrain(cfg, data)
    save_checkpoint(res.checkpoint, out / "pretrain.pt")
    _write_history(out / "pretrain_history.csv", res.history)
    return res.model


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if not args.spec:
        raise ConfigError("synth needs a spec file")
    spec = load_synth_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    series, graph = synth_generate(spec)
    out = _out_dir(args, None)
    save_series(series, out / "series.csv")
    save_graph(graph, out / "graph.csv")
    _write_meta(out, args, None, {"nodes": spec.nodes, "steps": series.num_steps})
    print(out / "series.csv")
    print(out / "graph.csv")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    data = prepare_data(cfg)
    out = _out_dir(args, cfg)
    res = pretrain(cfg, data)
    save_checkpoint(res.checkpoint, out / "pretrain.pt")
    _write_history(out / "pretrain_history.csv", res.history)
    _write_meta(out, args, cfg, {"best_val_loss": res.best_val})
    print(f"best validation reconstruction loss {res.best_val:.6f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    data = prepare_data(cfg)
    out = _out_dir(args, cfg)
    mst = None if cfg.extractors.variant == "st_only" else _pretrained(args, cfg, data, out)
    res = train_forecast(cfg, data, mst)
    save_checkpoint(res.checkpoint, out / "model.pt")
    _write_history(out / "train_history.csv", res.history)
    res.test_report.to_csv(out / "test_report.csv")
    (out / "test_report.txt").write_text(res.test_report.to_text())
    _write_meta(out, args, cfg, {"best_val_mae": res.best_val, "variant": cfg.extractors.variant})
    print(res.test_report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _load_cfg(args) if args.config else Config.from_dict(ckpt["config"])
    data = prepare_data(cfg)
    out = _out_dir(args, cfg)
    report = evaluate_checkpoint(ckpt, data, args.split)
    report.to_csv(out / f"{args.split}_eval_report.csv")
    (out / f"{args.split}_eval_report.txt").write_text(report.to_text())
    _write_meta(out, args, cfg, {"checkpoint": str(args.checkpoint)})
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    data = prepare_data(cfg)
    out = _out_dir(args, cfg)
    mst = _pretrained(args, cfg, data, out)
    results = run_ablation(cfg, data, mst)
    reports = {v: r.test_report for v, r in results.items()}
    write_ablation(reports, out / "ablation.csv", out / "ablation.txt")
    _write_meta(out, args, cfg, {"variants": list(VARIANTS)})
    print((out / "ablation.txt").read_text(), end="")
    return EXIT_OK


def plot_series(ckpt: dict, data: PreparedData, nodes: list[int], start: int, stop: int,
                horizon: int):
    """Truth and ``horizon``-step-ahead predictions for test-slice steps ``[start, stop)``.

    Returns ``(steps, truth, pred, missing)``; arrays are ``[stop - start, len(nodes)]``.
    """
    if horizon not in (3, 6, 12):
        raise ConfigError("horizon must be 3, 6 or 12")
    model, cfg = model_from_checkpoint(ckpt, data)
    lay = data.layout
    if horizon > lay.F:
        raise ConfigError(f"horizon {horizon} exceeds forecast length {lay.F}")
    T, V = data.test.num_steps, data.num_nodes
    bad = [n for n in nodes if not 0 <= n < V]
    if bad:
        raise RangeError(f"node ids {bad} outside [0, {V})")
    # target step tau is forecast from origin tau - horizon + 1
    lo, hi = lay.L + horizon - 1, T - lay.F + horizon
    if not (lo <= start < stop <= hi):
        raise RangeError(f"range [{start}, {stop}) outside the forecastable test steps [{lo}, {hi})")
    windows = data.windows("test", 1)
    first = start - horizon + 1 - lay.L
    sub = _SubWindows(windows, np.arange(first, first + (stop - start)))
    y_hat, y, valid = predict(model, sub, normalizer_from_checkpoint(ckpt),
                              batch_size=cfg.train.eval_batch_size)
    h = horizon - 1
    return (np.arange(start, stop), y[:, h][:, nodes], y_hat[:, h][:, nodes], ~valid[:, h][:, nodes])


class _SubWindows:
    def __init__(self, windows, indices):
        self.windows, self.indices = windows, indices

    def __len__(self):
        return len(self.indices)

    def batch(self, idx):
        return self.windows.batch(self.indices[np.asarray(idx)])


def cmd_plot(args) -> int:
    if not args.checkpoint:
        raise ConfigError("plot needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _load_cfg(args) if args.config else Config.from_dict(ckpt["config"])
    data = prepare_data(cfg)
    out = _out_dir(args, cfg)
    nodes = [int(n) for n in args.nodes.split(",")] if args.nodes else [0]
    horizon = args.horizon or 3
    start = args.start if args.start is not None else data.layout.L + horizon - 1
    stop = args.stop if args.stop is not None else start + 288
    steps, truth, pred, missing = plot_series(ckpt, data, nodes, start, stop, horizon)
    csv_path = out / f"plot_h{horizon}.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + [f"{k}_{n}" for n in nodes for k in ("truth", "pred", "missing")])
        for i, step in enumerate(steps):
            row = [int(step)]
            for j in range(len(nodes)):
                row += ["" if missing[i, j] else repr(float(truth[i, j])),
                        repr(float(pred[i, j])), int(missing[i, j])]
            w.writerow(row)
    print(csv_path)
    if not args.no_image:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(len(nodes), 1, figsize=(10, 2.5 * len(nodes)), squeeze=False)
        for j, (ax, n) in enumerate(zip(axes[:, 0], nodes)):
            ax.plot(steps, np.where(missing[:, j], np.nan, truth[:, j]), label="ground truth")
            ax.plot(steps, pred[:, j], label=f"{5 * horizon}-min ahead")
            ax.set_ylabel(f"node {n}")
            ax.legend(loc="upper right", fontsize="small")
        axes[-1, 0].set_xlabel("test step")
        fig.tight_layout()
        png = out / f"plot_h{horizon}.png"
        fig.savefig(png, dpi=100, metadata={"Software": None} if args.no_timestamp else None)
        plt.close(fig)
        print(png)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (INI)")
    common.add_argument("--out", help="output directory (default runs/<config hash>)")
    common.add_argument("--seed", type=int)
    common.add_argument("--no-timestamp", action="store_true",
                        help="omit wall-clock timestamps from metadata")
    common.add_argument("-v", "--verbose", action="store_true")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--stgnn", help="registered short-term model name")
    model_flags.add_argument("--ablation", choices=VARIANTS)
    model_flags.add_argument("--pretrained", help="pretrained encoder checkpoint")

    p = argparse.ArgumentParser(prog="lsttn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("spec", nargs="?", help="synthetic spec (key = value)")
    sub.add_parser("pretrain", parents=[common], help="masked pretraining of the encoder")
    sub.add_parser("train", parents=[common, model_flags], help="train the forecaster")
    e = sub.add_parser("eval", parents=[common, model_flags], help="evaluate a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--split", choices=("val", "test"), default="test")
    sub.add_parser("ablate", parents=[common, model_flags], help="train all ablation variants")
    pl = sub.add_parser("plot", parents=[common, model_flags], help="prediction snapshot")
    pl.add_argument("--checkpoint")
    pl.add_argument("--nodes", help="comma-separated node indices")
    pl.add_argument("--start", type=int, help="first test-slice step")
    pl.add_argument("--stop", type=int, help="end test-slice step (exclusive)")
    pl.add_argument("--horizon", type=int, choices=(3, 6, 12))
    pl.add_argument("--no-image", action="store_true")
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (OSError, ParseError)):
        return EXIT_IO
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_FAILURE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (LSTTNError, OSError) as exc:
        category = getattr(exc, "category", "io")
        msg = str(exc).replace("\n", " ")
        print(f"error: {category}: {msg}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
