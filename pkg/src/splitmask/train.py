"""Pre-training, finetuning, linear probing, the epoch-budget rule and sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import RunConfig, apply_overrides, config_hash, save_config
from .data import AugmentPolicy, LabeledDataset, augment, load_image_folder, patchify_batch, synth_generate
from .errors import ConfigError, ConfigMismatchError, NumericalError
from .losses import beit_loss, total_loss
from .masking import make_plans
from .model import Model, ModelConfig, decays, load_checkpoint, save_checkpoint
from .numerics import Tensor
from .tokenizer import Vocabulary, build_vocabulary, load_vocabulary, save_vocabulary, tokenize_patches

log = logging.getLogger(__name__)

__all__ = [
    "EPOCH_PRESETS",
    "epoch_budget",
    "resolve_epochs",
    "cosine_lr",
    "OptimizerState",
    "AdamW",
    "adamw_step",
    "load_datasets",
    "pretrain",
    "finetune",
    "probe",
    "sweep",
    "PretrainResult",
    "FinetuneResult",
]

IMAGENET_TRAIN = 1_281_167

# pre-training epochs used for each dataset in the published setup
EPOCH_PRESETS = {
    "imagenet": 300,
    "inaturalist2018": 800,
    "inaturalist2019": 1400,
    "food101": 5000,
    "stanford_cars": 5000,
    "clipart": 5000,
    "painting": 5000,
    "sketch": 5000,
    "ade20k": 21000,
    "coco": 3000,
}

METRIC_COLUMNS = ("step", "epoch", "lr", "loss_total", "loss_mim", "loss_nce", "images_per_sec")


# ------------------------------------------------------------------ schedules


def epoch_budget(dataset_size: float, reference_size: float, reference_epochs: float,
                 cap: float | None = None, round_to: int = 1) -> int:
    """Epochs that keep the number of updates equal to ``reference_epochs`` on ``reference_size`` images.

    ``dataset_size`` may be fractional (``0.01 * reference_size`` for a 1%
    subset).  The result is rounded half up to a multiple of ``round_to``
    and then capped.
    """
    if dataset_size <= 0 or reference_size <= 0 or reference_epochs <= 0 or round_to < 1:
        raise ValueError("epoch_budget inputs must be positive")
    raw = reference_epochs * reference_size / dataset_size
    epochs = int(math.floor(raw / round_to + 0.5)) * round_to
    if cap is not None and not math.isinf(cap):
        epochs = min(int(cap), epochs)
    return max(1, epochs)


def resolve_epochs(cfg: RunConfig, dataset_size: int) -> int:
    s = cfg.schedule
    if s.epochs is not None:
        return int(s.epochs)
    if s.preset is not None:
        try:
            return EPOCH_PRESETS[s.preset.lower()]
        except KeyError:
            raise ConfigError(f"schedule.preset: unknown dataset {s.preset!r}") from None
    return epoch_budget(dataset_size, s.reference_size, s.reference_epochs, s.cap, s.round_to)


def cosine_lr(step: float, warmup: int, total: int, peak: float, floor: float = 0.0) -> float:
    """Linear warmup from 0 to ``peak`` over ``warmup`` steps, then cosine decay to ``floor`` at ``total``."""
    if step < warmup:
        return peak * step / warmup
    if total <= warmup:
        return floor
    progress = min(1.0, (step - warmup) / (total - warmup))
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    decayed: set[str] = field(default_factory=set)  # names that received weight decay so far


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
               wd: float = 0.05, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               no_decay=None, lr_scale=None) -> OptimizerState:
    """One AdamW update in place.

    Decay is decoupled and applied first (``p *= 1 - lr * wd``) to every
    parameter for which ``decays(name)`` holds and that is not listed in
    ``no_decay``.  Parameters without a gradient are left untouched.
    ``lr_scale`` optionally maps a parameter name to a learning-rate multiplier.
    """
    base_lr = lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise nx.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        lr = base_lr * lr_scale.get(name, 1.0) if lr_scale else base_lr
        if wd and decays(name) and not (no_decay and name in no_decay):
            p.data *= p.dtype.type(1.0 - lr * wd)
            state.decayed.add(name)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    return state


def layer_lr_scales(names, depth: int, decay: float) -> dict[str, float]:
    """Layer-wise learning-rate multipliers ``decay ** (depth + 1 - layer)``.

    Embeddings sit at layer 0, encoder block ``i`` at ``i + 1`` and everything
    after the encoder (final norm, heads) at ``depth + 1`` with multiplier 1.
    """
    out = {}
    for name in names:
        parts = name.split(".")
        if parts[0] in ("patch_embed", "pos_embed", "mask_token"):
            layer = 0
        elif parts[0] == "encoder" and parts[1].isdigit():
            layer = int(parts[1]) + 1
        else:
            layer = depth + 1
        out[name] = decay ** (depth + 1 - layer)
    return out


class AdamW:
    def __init__(self, params: dict[str, Tensor], weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8, clip_grad=None,
                 lr_scale: dict[str, float] | None = None):
        self.params = params
        self.lr_scale = lr_scale
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.clip_grad = clip_grad
        self.state = OptimizerState()

    def grads(self) -> dict[str, np.ndarray]:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if self.clip_grad:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > self.clip_grad:
                s = self.clip_grad / (norm + 1e-6)
                grads = {k: g * g.dtype.type(s) for k, g in grads.items()}
        return grads

    def step(self, lr: float) -> None:
        adamw_step(self.params, self.grads(), self.state, lr, self.weight_decay, self.betas[0], self.betas[1], self.eps,
                   lr_scale=self.lr_scale)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ------------------------------------------------------------------ data


def load_datasets(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.data
    if d.source == "synth":
        train, test = synth_generate(d.synth_seed, d.n_train, d.n_test, d.synth_classes, cfg.model.image_size)
    else:
        if not d.path:
            raise ConfigError("data.path: required for folder datasets")
        train = load_image_folder(d.path, d.train_manifest, d.num_classes, "train")
        test_path = Path(d.path) / d.test_manifest
        test = (load_image_folder(d.path, d.test_manifest, train.num_classes, "test")
                if test_path.exists() else train.subset([], "test"))
    if d.fraction < 1.0:
        train = train.fraction(d.fraction, d.fraction_seed)
    return train, test


def _rng(seed: int, purpose: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, purpose, step]))


_AUG, _MASK, _INIT, _HEAD, _MIX = 1, 2, 3, 4, 5


def _batch_images(dataset: LabeledDataset, idx, policy: AugmentPolicy, rng, size: int) -> np.ndarray:
    return np.stack([augment(dataset.image(int(i)), policy, rng, size) for i in idx])


def _eval_images(dataset: LabeledDataset, size: int) -> np.ndarray:
    return dataset.images(size=size)


def _build_vocab(cfg: RunConfig, train: LabeledDataset) -> Vocabulary:
    t = cfg.tokenizer
    if t.path:
        vocab = load_vocabulary(t.path)
    else:
        kw = {}
        if t.kind == "kmeans":
            kw = dict(sample_budget=t.sample_budget, iters=t.iters, center=t.center, size=cfg.model.image_size)
        elif t.kind == "random_patches":
            kw = dict(center=t.center, size=cfg.model.image_size)
        vocab = build_vocabulary(t.kind, train, cfg.model.vocab_size, cfg.model.patch_size, t.seed, **kw)
    if vocab.V != cfg.model.vocab_size or vocab.d != cfg.model.patch_dim:
        raise ConfigMismatchError(
            f"vocabulary is {vocab.V}x{vocab.d}, model expects {cfg.model.vocab_size}x{cfg.model.patch_dim}")
    return vocab


class _CsvLog:
    def __init__(self, path: Path | None, columns):
        self.columns = list(columns)
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.DictWriter(self._fh, self.columns, lineterminator="\n")
            self._writer.writeheader()

    def write(self, row: dict) -> None:
        row = {k: row.get(k, "") for k in self.columns}
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow({k: _fmt(v) for k, v in row.items()})

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


# ------------------------------------------------------------------ pre-training


@dataclass
class PretrainResult:
    model: Model
    vocab: Vocabulary
    metrics: list[dict]
    epochs: int
    total_steps: int
    checkpoint: Path | None = None


def pretrain(cfg: RunConfig, out_dir=None, train: LabeledDataset | None = None, vocab: Vocabulary | None = None) -> PretrainResult:
    """Optimise the masked-image-modeling objective for the epoch-budget-scaled number of steps.

    Writes ``metrics.csv``, ``throughput.csv``, ``vocab.pvoc`` and
    checkpoints under ``out_dir`` when given.  A NaN/Inf in the forward pass
    saves ``diagnostic.smck`` and re-raises :class:`NumericalError`.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model
    if mcfg.mode == "beit" and cfg.loss.w_nce > 0:
        raise ConfigError("loss.w_nce: the beit baseline has no descriptors; set it to 0")
    if mcfg.mode == "beit" and cfg.loss.w_mim == 0:
        raise ConfigError("loss.w_mim: the beit baseline needs the MIM loss")
    if train is None:
        train, _ = load_datasets(cfg)
    if len(train) == 0:
        raise ConfigError("data: empty training set")
    vocab = vocab if vocab is not None else _build_vocab(cfg, train)
    if out is not None:
        save_vocabulary(vocab, out / "vocab.pvoc")

    epochs = resolve_epochs(cfg, len(train))
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = epochs * per_epoch
    if cfg.schedule.max_steps is not None:
        total = min(total, cfg.schedule.max_steps)
    warmup = cfg.schedule.warmup_steps if cfg.schedule.warmup_steps is not None else int(round(cfg.schedule.warmup_frac * total))
    peak = cfg.optim.base_lr * cfg.batch_size / 256

    model = Model.init(mcfg, cfg.seed)
    opt = AdamW(model.params, cfg.optim.weight_decay, (cfg.optim.beta1, cfg.optim.beta2), cfg.optim.eps, cfg.optim.clip_grad)
    policy = AugmentPolicy.named(cfg.augment)
    ms = cfg.masking

    columns = ["step", "epoch", "lr", "loss_total"]
    if cfg.loss.w_mim > 0:
        columns.append("loss_mim")
    if cfg.loss.w_nce > 0 and mcfg.mode == "splitmask":
        columns.append("loss_nce")
    columns.append("images_per_sec")
    metrics = _CsvLog(out / "metrics.csv" if out else None, columns)
    timing = _CsvLog(out / "throughput.csv" if out else None, ["step", "images_per_sec"])

    step = 0
    try:
        for epoch in range(epochs):
            order = train.epoch_order(cfg.seed, epoch)
            for b in range(per_epoch):
                if step >= total:
                    break
                t0 = time.perf_counter()
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                imgs = _batch_images(train, idx, policy, _rng(cfg.seed, _AUG, step), mcfg.image_size)
                patches = patchify_batch(imgs, mcfg.patch_size)
                targets = tokenize_patches(patches, vocab)
                plans = make_plans(ms.kind, len(idx), mcfg.grid, ms.ratio, _rng(cfg.seed, _MASK, step),
                                   ms.min_block, ms.max_block)
                lr = cosine_lr(step + 1, warmup, total, peak, cfg.schedule.floor)
                with nx.Tape():
                    try:
                        if mcfg.mode == "splitmask":
                            branch_a, branch_b = model.forward_splitmask(patches, plans)
                            losses = total_loss(branch_a, branch_b, targets, cfg.loss.tau, cfg.loss.w_mim, cfg.loss.w_nce)
                            values = losses.values()
                            loss = losses.total
                        else:
                            logits, masked = model.forward_beit(patches, plans)
                            loss = nx.scale(beit_loss(logits, targets, masked), cfg.loss.w_mim)
                            values = {"loss_total": float(loss.data), "loss_mim": float(loss.data) / cfg.loss.w_mim}
                    except NumericalError as e:
                        if out is not None:
                            save_checkpoint(out / "diagnostic.smck", model, step, extra={"error": str(e), "epoch": epoch})
                        raise NumericalError(f"step {step}: {e}") from None
                    opt.zero_grad()
                    nx.backward(loss)
                opt.step(lr)
                step += 1
                ips = len(idx) / max(time.perf_counter() - t0, 1e-9)
                row = {"step": step, "epoch": epoch, "lr": lr, **values}
                if cfg.log_throughput:
                    row["images_per_sec"] = ips
                metrics.write(row)
                timing.write({"step": step, "images_per_sec": round(ips, 3)})
                if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"checkpoint_{step:07d}.smck", model, step, extra={"epoch": epoch})
            if step >= total:
                break
    finally:
        metrics.close()
        timing.close()
    ckpt = None
    if out is not None:
        ckpt = save_checkpoint(out / "checkpoint.smck", model, step, extra={"epochs": epochs, "config_hash": config_hash(cfg)})
    return PretrainResult(model, vocab, metrics.rows, epochs, total, ckpt)


# ------------------------------------------------------------------ finetuning

ARCH_KEYS = ("image_size", "patch_size", "embed_dim", "encoder_depth", "num_heads", "mlp_ratio")


def _check_arch(have: ModelConfig, want: ModelConfig) -> None:
    diff = {k: (getattr(have, k), getattr(want, k)) for k in ARCH_KEYS if getattr(have, k) != getattr(want, k)}
    if diff:
        raise ConfigMismatchError(f"checkpoint encoder differs from model config: {diff}")


@dataclass
class FinetuneResult:
    top1_best: float
    top1_final: float
    history: list[tuple[int, float]]
    model: Model


def _accuracy(model: Model, images: np.ndarray, labels: np.ndarray, batch: int = 256) -> float:
    correct = 0
    with nx.no_grad():
        for s in range(0, len(images), batch):
            p = patchify_batch(images[s : s + batch], model.config.patch_size)
            pred = model.classify(p).data.argmax(axis=1)
            correct += int((pred == labels[s : s + batch]).sum())
    return correct / max(len(images), 1)


def _mix(imgs: np.ndarray, onehot: np.ndarray, spec, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(len(imgs))
    if spec.cutmix > 0 and (spec.mixup <= 0 or rng.random() < 0.5):
        lam = rng.beta(spec.cutmix, spec.cutmix)
        H, W = imgs.shape[2:]
        h, w = int(round(H * math.sqrt(1 - lam))), int(round(W * math.sqrt(1 - lam)))
        top, left = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
        imgs = imgs.copy()
        imgs[:, :, top : top + h, left : left + w] = imgs[perm, :, top : top + h, left : left + w]
        lam = 1 - h * w / (H * W)
    else:
        lam = rng.beta(spec.mixup, spec.mixup)
        imgs = lam * imgs + (1 - lam) * imgs[perm]
    return imgs.astype(np.float32), lam * onehot + (1 - lam) * onehot[perm]


def finetune(cfg: RunConfig, train: LabeledDataset, test: LabeledDataset, model: Model | None = None,
             checkpoint=None, seed: int | None = None, eval_every: int = 1, out_dir=None, tag: str | None = None) -> FinetuneResult:
    """Train every weight plus a classifier head on mean-pooled final encoder features.

    Starts from ``model``, from ``checkpoint`` (a path), or from a random
    initialisation when neither is given.  Reports the best and the final
    test top-1 accuracy.
    """
    f = cfg.finetune
    seed = cfg.seed if seed is None else seed
    checkpoint = checkpoint or f.checkpoint
    if checkpoint is not None:
        ck = load_checkpoint(checkpoint)
        _check_arch(ck.config, cfg.model)
        model = ck.model()
    if model is None:
        model = Model.init(replace(cfg.model, num_classes=0), seed)
    else:
        _check_arch(model.config, cfg.model)
    model = model.with_classifier(train.num_classes, seed)
    if test.num_classes != train.num_classes:
        raise ConfigMismatchError(f"train has {train.num_classes} classes, test {test.num_classes}")

    size = model.config.image_size
    per_epoch = math.ceil(len(train) / f.batch_size)
    total = f.epochs * per_epoch
    warmup = int(round(f.warmup_frac * total))
    peak = f.base_lr * f.batch_size / 256
    scales = (layer_lr_scales(model.params, model.config.encoder_depth, f.layer_decay)
              if f.layer_decay < 1.0 else None)
    opt = AdamW(model.params, f.weight_decay, (cfg.optim.beta1, cfg.optim.beta2), cfg.optim.eps, f.clip_grad, scales)
    policy = AugmentPolicy.named(f.augment)
    labels = train.labels
    C = train.num_classes
    test_imgs, test_labels = _eval_images(test, size), test.labels

    history: list[tuple[int, float]] = []
    step = 0
    for epoch in range(f.epochs):
        order = train.epoch_order(seed + 7919, epoch)
        for b in range(per_epoch):
            idx = order[b * f.batch_size : (b + 1) * f.batch_size]
            imgs = _batch_images(train, idx, policy, _rng(seed, _AUG + 10, step), size)
            onehot = np.eye(C, dtype=np.float32)[labels[idx]]
            if f.mixup > 0 or f.cutmix > 0:
                imgs, onehot = _mix(imgs, onehot, f, _rng(seed, _MIX, step))
            if f.label_smoothing:
                onehot = onehot * (1 - f.label_smoothing) + f.label_smoothing / C
            lr = cosine_lr(step + 1, warmup, total, peak, f.floor)
            with nx.Tape():
                logits = model.classify(patchify_batch(imgs, model.config.patch_size))
                loss = nx.cross_entropy_soft(logits, onehot)
                opt.zero_grad()
                nx.backward(loss)
            opt.step(lr)
            step += 1
        if (epoch + 1) % eval_every == 0 or epoch + 1 == f.epochs:
            history.append((epoch + 1, _accuracy(model, test_imgs, test_labels)))
    best = max(a for _, a in history)
    result = FinetuneResult(best, history[-1][1], history, model)
    if out_dir is not None:
        write_eval_rows(Path(out_dir) / "eval.csv", tag or cfg.tag, seed,
                        {"top1_best": best, "top1_final": result.top1_final})
    return result


# ------------------------------------------------------------------ probing


def _standardize(train_f: np.ndarray, test_f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = train_f.mean(axis=0)
    sd = train_f.std(axis=0) + 1e-6
    return (train_f - mu) / sd, (test_f - mu) / sd


def _collect_features(model: Model, images: np.ndarray, layers, batch: int = 256) -> dict[int, np.ndarray]:
    feats: dict[int, list] = {li: [] for li in layers}
    with nx.no_grad():
        for s in range(0, len(images), batch):
            p = patchify_batch(images[s : s + batch], model.config.patch_size)
            for li, t in model.layer_features(p, layers).items():
                feats[li].append(t.data.astype(np.float64))
    return {li: np.concatenate(v) for li, v in feats.items()}


def linear_probe(train_x, train_y, test_x, test_y, num_classes, spec, seed: int = 0) -> float:
    """Softmax regression on frozen, standardised features, trained with AdamW; returns test top-1."""
    tr, te = _standardize(train_x, test_x)
    tr, te = tr.astype(np.float32), te.astype(np.float32)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _HEAD]))
    params = {
        "probe.weight": Tensor(rng.standard_normal((tr.shape[1], num_classes)) * 0.01, requires_grad=True),
        "probe.bias": Tensor(np.zeros(num_classes), requires_grad=True),
    }
    opt = AdamW(params, spec.weight_decay)
    per_epoch = math.ceil(len(tr) / spec.batch_size)
    total = spec.epochs * per_epoch
    peak = spec.base_lr
    step = 0
    for epoch in range(spec.epochs):
        order = np.random.default_rng(np.random.SeedSequence([seed, _HEAD, epoch])).permutation(len(tr))
        for b in range(per_epoch):
            idx = order[b * spec.batch_size : (b + 1) * spec.batch_size]
            with nx.Tape():
                logits = nx.add_bias(nx.matmul(Tensor(tr[idx]), params["probe.weight"]), params["probe.bias"])
                loss = nx.cross_entropy_logits(logits, train_y[idx])
                opt.zero_grad()
                nx.backward(loss)
            opt.step(cosine_lr(step + 1, 0, total, peak, 0.0))
            step += 1
    pred = (te @ params["probe.weight"].data + params["probe.bias"].data).argmax(axis=1)
    return float((pred == test_y).mean())


def probe(cfg: RunConfig, train: LabeledDataset, test: LabeledDataset, model: Model | None = None,
          checkpoint=None, layers=None, seed: int | None = None) -> dict[int, float]:
    """Frozen-feature linear-probe accuracy for each requested encoder layer (0 = embeddings)."""
    seed = cfg.seed if seed is None else seed
    checkpoint = checkpoint or cfg.probe.checkpoint
    if checkpoint is not None:
        ck = load_checkpoint(checkpoint)
        _check_arch(ck.config, cfg.model)
        model = ck.model()
    if model is None:
        model = Model.init(replace(cfg.model, num_classes=0), seed)
    depth = model.config.encoder_depth
    if layers is None:
        layers = cfg.probe.layers
    if layers == "all":
        layers = list(range(depth + 1))
    elif isinstance(layers, int):
        layers = [layers]
    for li in layers:
        if not 0 <= li <= depth:
            raise IndexError(f"probe layer {li} outside [0, {depth}]")
    size = model.config.image_size
    ftr = _collect_features(model, _eval_images(train, size), layers)
    fte = _collect_features(model, _eval_images(test, size), layers)
    return {li: linear_probe(ftr[li], train.labels, fte[li], test.labels, train.num_classes, cfg.probe, seed)
            for li in layers}


def write_eval_rows(path, tag: str, seed: int, metrics: dict) -> Path:
    """Append ``tag,seed,metric,value`` rows (header written on creation)."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["tag", "seed", "metric", "value"])
        for k, v in metrics.items():
            w.writerow([tag, seed, k, repr(float(v))])
    return path


# ------------------------------------------------------------------ sweeps


def _grid_cells(grid: dict) -> list[dict]:
    cells = [{}]
    for key in sorted(grid):
        values = grid[key]
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.grid.{key}: expected a nonempty list")
        cells = [{**c, key: v} for c in cells for v in values]
    return cells


def run_cell(cfg: RunConfig) -> dict:
    """Pre-train one configuration and evaluate it downstream; returns flat metrics."""
    train, test = load_datasets(cfg)
    res = pretrain(cfg, train=train)
    metrics = {"epochs": res.epochs, "steps": res.total_steps}
    if res.metrics:
        metrics["final_loss_total"] = res.metrics[-1]["loss_total"]
    if cfg.sweep.evaluate == "finetune":
        ft = finetune(cfg, train, test, model=res.model)
        metrics.update(top1_best=ft.top1_best, top1_final=ft.top1_final)
    else:
        layer = cfg.sweep.probe_layer
        layer = cfg.model.encoder_depth if layer is None else layer
        metrics["probe_top1"] = probe(cfg, train, test, model=res.model, layers=[layer])[layer]
    return metrics


def _run_cell_job(args):
    cfg_dict, cell_path = args
    cfg = RunConfig.from_dict(cfg_dict)
    try:
        metrics, status = run_cell(cfg), "ok"
    except Exception as e:  # one failing cell must not abort the sweep
        metrics, status = {"error": f"{type(e).__name__}: {e}"}, "failed"
    record = {"status": status, "metrics": metrics}
    if status == "ok":
        Path(cell_path).write_text(json.dumps(record, sort_keys=True), encoding="utf-8")
    return record


def sweep(cfg: RunConfig, out_dir, workers: int | None = None) -> list[dict]:
    """Run every grid cell (skipping cells whose config hash already has a result) and write ``results.csv``."""
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    base = cfg.to_dict()
    base["sweep"] = {**base["sweep"], "grid": {}}
    base["mode"] = "pretrain"
    jobs, rows = [], []
    for cell in _grid_cells(cfg.sweep.grid):
        cell_cfg = RunConfig.from_dict(apply_overrides(base, list(cell.items())))
        h = config_hash(cell_cfg)
        rows.append({"cell": cell, "hash": h})
        path = out / "cells" / f"{h}.json"
        if not path.exists():
            jobs.append((h, (cell_cfg.to_dict(), str(path))))
    workers = workers if workers is not None else int(os.environ.get("SPLITMASK_WORKERS", "1"))
    log.info("sweep: %d cells, %d to run, %d workers", len(rows), len(jobs), workers)
    failures = {}
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            for (h, _), rec in zip(jobs, ex.map(_run_cell_job, [j for _, j in jobs])):
                if rec["status"] != "ok":
                    failures[h] = rec
    else:
        for h, job in jobs:
            rec = _run_cell_job(job)
            if rec["status"] != "ok":
                failures[h] = rec
    results = []
    for row in rows:
        h = row["hash"]
        path = out / "cells" / f"{h}.json"
        rec = json.loads(path.read_text()) if path.exists() else failures.get(h, {"status": "failed", "metrics": {}})
        results.append({"hash": h, "status": rec["status"], **{f"cell.{k}": v for k, v in row["cell"].items()}, **rec["metrics"]})
    columns = []
    for r in results:
        for k in r:
            if k not in columns:
                columns.append(k)
    with open(out / "results.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, columns, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow({k: _fmt(r.get(k)) for k in columns})
    return results
