"""Two-stage training: masked pretraining of the encoder, then forecaster training."""

from __future__ import annotations

import bisect
import copy
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Config
from .data import (
    DataLayout,
    Normalizer,
    TrafficGraph,
    TrafficSeries,
    fit_normalizer,
    load_graph,
    load_series,
    load_synth_spec,
    make_windows,
    sample_mask,
    split_dataset,
    split_subseries,
    synth_generate,
)
from .errors import CompatibilityError, DegenerateBatchError, DivergenceError, ValidationError
from .fusion import VARIANTS, forecast_loss, variant_parts
from .metrics import HorizonReport, horizon_report, masked_mae
from .model import LSTTN
from .mst import MaskedSubseriesTransformer, encode_all, pretrain_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def lr_schedule(epoch: int, base_lr: float, milestones=(50, 80), gamma: float = 0.1) -> float:
    """Multistep decay: ``base_lr * gamma ** (#milestones <= epoch)``."""
    return base_lr * gamma ** bisect.bisect_right(sorted(milestones), epoch)


def param_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedData:
    series: TrafficSeries
    graph: TrafficGraph | None
    layout: DataLayout
    normalizer: Normalizer
    train: TrafficSeries
    val: TrafficSeries
    test: TrafficSeries

    @property
    def num_nodes(self) -> int:
        return self.series.num_nodes

    def windows(self, split: str, stride: int = 1):
        return make_windows(getattr(self, split), self.layout, self.normalizer, stride)


def prepare_data(cfg: Config, series: TrafficSeries | None = None,
                 graph: TrafficGraph | None = None) -> PreparedData:
    d = cfg.data
    if series is None:
        if d.synth:
            series, synth_graph = synth_generate(load_synth_spec(cfg.resolve(d.synth)))
            graph = synth_graph if graph is None and not d.graph else graph
        elif d.series:
            series = load_series(cfg.resolve(d.series), d.format or None)
        else:
            raise ValidationError("config [data] needs either 'series' or 'synth'")
    if graph is None and d.graph:
        graph = load_graph(cfg.resolve(d.graph), series.num_nodes)
    layout = cfg.layout.layout()
    train, val, test = split_dataset(series, d.ratios, min_length=layout.L + layout.F)
    return PreparedData(series, graph, layout, fit_normalizer(train), train, val, test)


def _torch_batch(batch: dict, dtype=torch.float32) -> dict:
    return {k: torch.as_tensor(v, dtype=dtype if v.dtype.kind == "f" else None)
            for k, v in batch.items()}


def _batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _make_optimizer(params, cfg: Config, lr: float):
    t = cfg.train
    return torch.optim.Adam(params, lr=lr, betas=(t.beta1, t.beta2), eps=t.eps,
                            weight_decay=t.weight_decay)


def _step(loss, params, optimizer, grad_clip: float, context: str):
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()} at {context}")
    optimizer.zero_grad()
    loss.backward()
    if grad_clip and grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, grad_clip)
    optimizer.step()


# ---------------------------------------------------------------------------
# pretraining


def build_mst(cfg: Config) -> MaskedSubseriesTransformer:
    m = cfg.mst
    layout = cfg.layout.layout()
    return MaskedSubseriesTransformer(layout.n_sub, layout.S, m.d_repr, m.n_layers, m.n_heads,
                                      m.d_ff or None, m.dropout)


@dataclass
class PretrainResult:
    model: MaskedSubseriesTransformer
    history: list[dict]
    best_val: float
    checkpoint: dict


def reconstruction_loss(model, windows, mask_ratio: float, seed: int, batch_size: int = 64) -> float:
    """Validation reconstruction error with masks drawn from a fixed seed."""
    rng = np.random.default_rng(seed)
    S = model.patch_len
    was_training = model.training
    model.eval()
    total = count = 0.0
    with torch.no_grad():
        for idx in _batches(len(windows), batch_size):
            b = _torch_batch(windows.batch(idx))
            masked, unmasked = sample_mask(model.n_sub, mask_ratio, rng)
            x_hat = model(b["x_long"], masked, unmasked)
            tokens = split_subseries(b["x_long"], S)
            valid = split_subseries(b["x_valid"], S)
            m = torch.as_tensor(masked)
            ok = valid[:, m].to(x_hat.dtype)
            total += float(((x_hat[:, m] - tokens[:, m]).abs() * ok).sum())
            count += float(ok.sum())
    model.train(was_training)
    if count == 0:
        raise DegenerateBatchError("validation set has no valid masked entries")
    return total / count


def pretrain(cfg: Config, data: PreparedData, epochs: int | None = None,
             model: MaskedSubseriesTransformer | None = None) -> PretrainResult:
    t = cfg.train
    epochs = t.pretrain_epochs if epochs is None else epochs
    torch.manual_seed(t.seed)
    rng = np.random.default_rng(t.seed)
    model = build_mst(cfg) if model is None else model
    train_w = data.windows("train", cfg.layout.pretrain_stride)
    val_w = data.windows("val", cfg.layout.eval_stride)
    params = list(model.parameters())
    opt = _make_optimizer(params, cfg, t.pretrain_lr)
    S = data.layout.S
    history, best_val, best_state, best_epoch = [], math.inf, None, -1
    for epoch in range(epochs):
        lr = lr_schedule(epoch, t.pretrain_lr, t.pretrain_milestones, t.gamma)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        start, losses = time.perf_counter(), []
        for step, idx in enumerate(_batches(len(train_w), t.batch_size, rng)):
            b = _torch_batch(train_w.batch(idx))
            masked, unmasked = sample_mask(model.n_sub, cfg.mst.mask_ratio, rng)
            x_hat = model(b["x_long"], masked, unmasked)
            loss = pretrain_loss(x_hat, split_subseries(b["x_long"], S), masked,
                                 split_subseries(b["x_valid"], S))
            _step(loss, params, opt, t.grad_clip, f"pretrain epoch {epoch} step {step} lr {lr:g}")
            losses.append(loss.item())
        val = reconstruction_loss(model, val_w, cfg.mst.mask_ratio, t.seed + 1, t.eval_batch_size)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at pretrain epoch {epoch}")
        history.append({"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                        "val_loss": val, "seconds": time.perf_counter() - start})
        log.info("pretrain epoch %d train %.4f val %.4f", epoch, history[-1]["train_loss"], val)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    ckpt = {
        "version": CHECKPOINT_VERSION,
        "kind": "pretrain",
        "config": cfg.to_dict(),
        "layout": _layout_meta(cfg),
        "normalizer": data.normalizer.to_dict(),
        "params": {"mst": model.state_dict()},
        "optimizer": opt.state_dict(),
        "epoch": best_epoch,
        "best_metric": best_val,
        "history": history,
    }
    return PretrainResult(model, history, best_val, ckpt)


def _layout_meta(cfg: Config) -> dict:
    return {"L": cfg.layout.L, "S": cfg.layout.S, "F": cfg.layout.F,
            "steps_per_day": cfg.layout.steps_per_day, "d_repr": cfg.mst.d_repr,
            "n_layers": cfg.mst.n_layers, "n_heads": cfg.mst.n_heads}


def mst_from_checkpoint(ckpt: dict, cfg: Config) -> MaskedSubseriesTransformer:
    meta = ckpt.get("layout", {})
    want = _layout_meta(cfg)
    for key in ("L", "S", "d_repr", "n_layers", "n_heads"):
        if key in meta and meta[key] != want[key]:
            raise CompatibilityError(f"pretrained checkpoint has {key}={meta[key]}, config has {want[key]}")
    model = build_mst(cfg)
    model.load_state_dict(ckpt["params"]["mst"])
    return model


# ---------------------------------------------------------------------------
# forecasting


def build_forecaster(cfg: Config, data: PreparedData, mst: MaskedSubseriesTransformer | None,
                     variant: str | None = None) -> LSTTN:
    e = cfg.extractors
    variant = e.variant if variant is None else variant
    torch.manual_seed(cfg.train.seed)
    return LSTTN(data.layout, data.num_nodes, mst, data.graph, variant, e.hidden, e.kernel_size,
                 e.K, e.d_emb, e.stgnn, e.stgnn_config(),
                 (e.fusion_h1, e.fusion_h2, e.fusion_h3), e.finetune_strl)


class ReprCache:
    """Frozen-encoder representations for every window of one split."""

    def __init__(self, mst, windows, batch_size: int = 64):
        chunks = []
        for idx in _batches(len(windows), batch_size):
            x = torch.as_tensor(windows.batch(idx)["x_long"], dtype=torch.float32)
            chunks.append(encode_all(mst, x))
        self.reps = torch.cat(chunks)

    def __getitem__(self, idx):
        return self.reps[torch.as_tensor(idx)]

    @staticmethod
    def nbytes(mst, windows) -> int:
        lay = windows.layout
        return len(windows) * lay.n_sub * windows.series.num_nodes * mst.d_repr * 4


def predict(model: LSTTN, windows, normalizer: Normalizer, cache: ReprCache | None = None,
            batch_size: int = 64, input_fn=None):
    """Denormalized forecasts with truth and validity, each ``[n, F, V]``.

    ``input_fn`` may rewrite the normalized ``x_long`` batch (representations are then
    recomputed rather than read from the cache).
    """
    model.eval()
    preds, ys, valids = [], [], []
    with torch.no_grad():
        for idx in _batches(len(windows), batch_size):
            b = windows.batch(idx)
            x = torch.as_tensor(b["x_long"], dtype=torch.float32)
            reps = None
            if input_fn is not None:
                x = input_fn(x)
            elif cache is not None and model.needs_reps:
                reps = cache[idx]
            out = model(x, reps)
            preds.append(normalizer.invert(out.double().numpy()))
            ys.append(b["y"])
            valids.append(b["y_valid"])
    return np.concatenate(preds), np.concatenate(ys), np.concatenate(valids)


def selection_mae(y_hat, y, valid) -> float:
    h = min(12, y.shape[1])
    return masked_mae(y_hat[:, h - 1], y[:, h - 1], valid[:, h - 1])


@dataclass
class ForecastResult:
    model: LSTTN
    history: list[dict]
    best_val: float
    test_report: HorizonReport | None
    checkpoint: dict
    caches: dict = field(default_factory=dict, repr=False)


def build_caches(cfg: Config, data: PreparedData, mst) -> dict[str, ReprCache | None]:
    strides = {"train": cfg.layout.train_stride, "val": cfg.layout.eval_stride,
               "test": cfg.layout.eval_stride}
    caches = {}
    budget = cfg.train.cache_limit_mb * 2 ** 20
    for split, stride in strides.items():
        w = data.windows(split, stride)
        size = ReprCache.nbytes(mst, w)
        if size <= budget:
            caches[split] = ReprCache(mst, w, cfg.train.eval_batch_size)
            budget -= size
        else:
            caches[split] = None
    return caches


def train_forecast(cfg: Config, data: PreparedData, mst: MaskedSubseriesTransformer | None,
                   variant: str | None = None, epochs: int | None = None,
                   caches: dict | None = None) -> ForecastResult:
    """Train extractors + fusion (+ short-term model) with the encoder frozen by default."""
    t = cfg.train
    variant = cfg.extractors.variant if variant is None else variant
    parts = variant_parts(variant)
    needs_reps = parts["long"] or parts["periodic"]
    if needs_reps and mst is None:
        raise CompatibilityError(f"variant {variant!r} needs a pretrained encoder")
    if mst is not None and (mst.n_sub != data.layout.n_sub or mst.patch_len != data.layout.S):
        raise CompatibilityError("pretrained encoder layout does not match the data layout")
    epochs = t.epochs if epochs is None else epochs
    model = build_forecaster(cfg, data, mst, variant)
    use_cache = needs_reps and not cfg.extractors.finetune_strl
    if use_cache and caches is None:
        caches = build_caches(cfg, data, mst)
    if not use_cache:
        caches = {}
    strl_hash = param_hash(mst) if mst is not None else None

    torch.manual_seed(t.seed)
    rng = np.random.default_rng(t.seed)
    train_w = data.windows("train", cfg.layout.train_stride)
    val_w = data.windows("val", cfg.layout.eval_stride)
    params = model.trainable_parameters()
    opt = _make_optimizer(params, cfg, t.lr)
    norm = data.normalizer
    history, best_val, best_state, best_epoch = [], math.inf, None, -1
    for epoch in range(epochs):
        lr = lr_schedule(epoch, t.lr, t.milestones, t.gamma)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        start, losses = time.perf_counter(), []
        for step, idx in enumerate(_batches(len(train_w), t.batch_size, rng)):
            b = _torch_batch(train_w.batch(idx))
            reps = caches["train"][idx] if caches.get("train") is not None else None
            out = model(b["x_long"], reps)
            loss = forecast_loss(out, norm.apply(b["y"]), ~b["y_valid"])
            _step(loss, params, opt, t.grad_clip, f"train epoch {epoch} step {step} lr {lr:g}")
            losses.append(loss.item())
        val = selection_mae(*predict(model, val_w, norm, caches.get("val"), t.eval_batch_size))
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation MAE at epoch {epoch}")
        history.append({"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                        "val_mae": val, "seconds": time.perf_counter() - start})
        log.info("[%s] epoch %d train %.4f val_mae %.4f", variant, epoch,
                 history[-1]["train_loss"], val)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    if strl_hash is not None and not cfg.extractors.finetune_strl:
        assert param_hash(mst) == strl_hash, "frozen encoder changed during forecast training"

    test_w = data.windows("test", cfg.layout.eval_stride)
    report = horizon_report(*predict(model, test_w, norm, caches.get("test"), t.eval_batch_size))
    ckpt = forecast_checkpoint(cfg, data, model, variant, opt, best_epoch, best_val, history)
    return ForecastResult(model, history, best_val, report, ckpt, caches)


def forecast_checkpoint(cfg, data, model: LSTTN, variant, opt, epoch, best_val, history) -> dict:
    params = {}
    for name in ("mst", "long_trend", "periodicity", "fusion"):
        sub = getattr(model, name)
        if sub is not None:
            params[name] = sub.state_dict()
    if model.short_trend is not None:
        params["short_trend"] = {cfg.extractors.stgnn: model.short_trend.state_dict()}
    return {
        "version": CHECKPOINT_VERSION,
        "kind": "forecast",
        "config": cfg.to_dict(),
        "variant": variant,
        "layout": _layout_meta(cfg),
        "normalizer": data.normalizer.to_dict(),
        "params": params,
        "optimizer": opt.state_dict() if opt is not None else None,
        "epoch": epoch,
        "best_metric": best_val,
        "history": history,
    }


def model_from_checkpoint(ckpt: dict, data: PreparedData) -> tuple[LSTTN, Config]:
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"unsupported checkpoint version {ckpt.get('version')!r}")
    if ckpt.get("kind") != "forecast":
        raise CompatibilityError(f"expected a forecast checkpoint, got {ckpt.get('kind')!r}")
    cfg = Config.from_dict(ckpt["config"])
    meta = _layout_meta(cfg)
    if (meta["L"], meta["S"], meta["F"]) != (data.layout.L, data.layout.S, data.layout.F):
        raise CompatibilityError("checkpoint layout does not match the data layout")
    params = ckpt["params"]
    mst = None
    if "mst" in params:
        mst = build_mst(cfg)
        mst.load_state_dict(params["mst"])
    model = build_forecaster(cfg, data, mst, ckpt["variant"])
    for name in ("long_trend", "periodicity", "fusion"):
        if name in params:
            getattr(model, name).load_state_dict(params[name])
    if "short_trend" in params:
        model.short_trend.load_state_dict(params["short_trend"][cfg.extractors.stgnn])
    return model, cfg


def normalizer_from_checkpoint(ckpt: dict) -> Normalizer:
    return Normalizer(ckpt["normalizer"]["mean"], ckpt["normalizer"]["std"])


def save_checkpoint(ckpt: dict, path) -> None:
    torch.save(ckpt, Path(path))


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or "version" not in ckpt:
        raise CompatibilityError(f"{path} is not a checkpoint")
    return ckpt


def evaluate_checkpoint(ckpt: dict, data: PreparedData, split: str = "test",
                        stride: int | None = None) -> HorizonReport:
    model, cfg = model_from_checkpoint(ckpt, data)
    stride = cfg.layout.eval_stride if stride is None else stride
    windows = data.windows(split, stride)
    cache = None
    if model.needs_reps and not cfg.extractors.finetune_strl:
        cache = ReprCache(model.mst, windows, cfg.train.eval_batch_size)
    return horizon_report(*predict(model, windows, normalizer_from_checkpoint(ckpt), cache,
                                   cfg.train.eval_batch_size))


def validation_mae(ckpt: dict, data: PreparedData) -> float:
    model, cfg = model_from_checkpoint(ckpt, data)
    windows = data.windows("val", cfg.layout.eval_stride)
    cache = None
    if model.needs_reps and not cfg.extractors.finetune_strl:
        cache = ReprCache(model.mst, windows, cfg.train.eval_batch_size)
    return selection_mae(*predict(model, windows, normalizer_from_checkpoint(ckpt), cache,
                                  cfg.train.eval_batch_size))


# ---------------------------------------------------------------------------
# ablation


def run_ablation(cfg: Config, data: PreparedData, mst: MaskedSubseriesTransformer | None,
                 variants=VARIANTS, epochs: int | None = None) -> dict[str, ForecastResult]:
    """Train every variant on the same data, seed and encoder."""
    caches = build_caches(cfg, data, mst) if mst is not None else {}
    results = {}
    for v in variants:
        results[v] = train_forecast(cfg, data, mst if v != "st_only" else None, v, epochs,
                                    caches if v != "st_only" else {})
    return results
