"""Training loop, Adam optimizer, class-balanced sampling and tiled inference.

Determinism contract: all randomness flows from the config seed, the sampler
draws each epoch from a generator keyed by (seed, epoch), and optimizer state
is part of the last-epoch checkpoint, so a killed run resumed from disk
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..datacube import HyperCube, LabelMask, TileGrid, extract_tiles, stitch
from ..errors import DataError, NumericError
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .model import HyperspectralViT, ModelConfig
from .tensor import Tensor, no_grad


@dataclass
class TrainConfig:
    """Optimization settings. The 6e-5 default learning rate matches the
    transformer variants; CNN-style baselines would use 1e-3."""

    learning_rate: float = 6e-5
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    oversample_positives: bool = True
    mf_loss_weight: bool = False
    normalize_input: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "batch_size": self.batch_size,
            "epochs": self.epochs, "seed": self.seed,
            "oversample_positives": self.oversample_positives,
            "mf_loss_weight": self.mf_loss_weight,
            "normalize_input": self.normalize_input,
        }


def fit_input_stats(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Per-band mean/std over valid pixels of the whole sample list."""
    total = None
    total_sq = None
    count = 0
    for s in samples:
        pixels = s.x[:, s.valid].astype(np.float64)  # (bands, n_valid)
        if total is None:
            total = pixels.sum(axis=1)
            total_sq = (pixels ** 2).sum(axis=1)
        else:
            total += pixels.sum(axis=1)
            total_sq += (pixels ** 2).sum(axis=1)
        count += pixels.shape[1]
    if count == 0:
        raise DataError("no valid pixels to fit normalization statistics")
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    return mean.astype(np.float32), np.sqrt(var).astype(np.float32)


@dataclass
class Sample:
    """One training tile in band-first layout."""

    x: np.ndarray                    # (bands, H, W) float32
    y: np.ndarray                    # (classes, H, W) float32 in {0,1}
    valid: np.ndarray                # (H, W) bool
    weight: np.ndarray | None = None  # (H, W) float32 loss weights

    @property
    def has_positives(self) -> bool:
        return bool((self.y[:, self.valid] > 0).any()) if self.valid.any() else False


def samples_from_tiles(tiles: Sequence[tuple[HyperCube, LabelMask]],
                       weights: Sequence[np.ndarray] | None = None) -> list[Sample]:
    out = []
    for i, (cube, mask) in enumerate(tiles):
        out.append(Sample(
            x=np.ascontiguousarray(cube.data.transpose(2, 0, 1)),
            y=np.ascontiguousarray(mask.values.transpose(2, 0, 1)).astype(np.float32),
            valid=cube.valid_mask(),
            weight=None if weights is None else np.asarray(weights[i], dtype=np.float32),
        ))
    return out


def bce_loss(logits: Tensor, targets: np.ndarray, valid: np.ndarray | None = None,
             pixel_weights: np.ndarray | None = None, multi_hot: bool = False) -> Tensor:
    """Masked sigmoid BCE; multi-hot labels just widen the class axis, the
    mean runs over classes either way."""
    del multi_hot
    return T.bce_with_logits(logits, targets, valid=valid, pixel_weights=pixel_weights)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_state(shapes: Sequence[tuple[int, ...]]) -> dict:
    return {
        "m": [np.zeros(s, dtype=np.float32) for s in shapes],
        "v": [np.zeros(s, dtype=np.float32) for s in shapes],
        "t": 0,
    }


def adam_step(values: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``values``."""
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for val, g, m, v in zip(values, grads, state["m"], state["v"]):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        val -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = adam_state([p.data.shape for p in self.params])

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state,
                  self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

class WeightedSampler:
    """Sampling with replacement; tiles containing positives are up-weighted
    so positive and negative draws are equally likely in expectation."""

    def __init__(self, positive_flags: Sequence[bool], seed: int):
        flags = np.asarray(positive_flags, dtype=bool)
        if flags.size == 0:
            raise DataError("cannot sample from an empty dataset")
        n_pos, n_neg = int(flags.sum()), int((~flags).sum())
        weights = np.ones(flags.size, dtype=np.float64)
        if n_pos and n_neg:
            weights[flags] = n_neg / n_pos
        self.probabilities = weights / weights.sum()
        self.seed = int(seed)

    def epoch(self, epoch_index: int, count: int | None = None) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0x5A, int(epoch_index)])
        n = count if count is not None else self.probabilities.size
        return rng.choice(self.probabilities.size, size=n, p=self.probabilities)

    def __iter__(self):
        epoch = 0
        while True:
            yield from self.epoch(epoch)
            epoch += 1


def weighted_sampler(labels: Sequence[LabelMask], seed: int) -> WeightedSampler:
    flags = [bool((m.values > 0).any()) for m in labels]
    return WeightedSampler(flags, seed)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    best_val_loss: float
    best_state: dict = field(repr=False, default_factory=dict)


def _batches(samples: Sequence[Sample], order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield (
            np.stack([samples[i].x for i in idx]),
            np.stack([samples[i].y for i in idx]),
            np.stack([samples[i].valid for i in idx])[:, None],
            (np.stack([samples[i].weight for i in idx])[:, None]
             if all(samples[i].weight is not None for i in idx) else None),
        )


def _dataset_loss(model: HyperspectralViT, samples: Sequence[Sample],
                  batch_size: int, use_weights: bool) -> float:
    """Exact mean elementwise loss over every valid pixel of the dataset."""
    total, count = 0.0, 0.0
    order = np.arange(len(samples))
    with no_grad():
        for xb, yb, vb, wb in _batches(samples, order, batch_size):
            logits = model.full_logits(Tensor(xb))
            denom = float(np.broadcast_to(vb, yb.shape).sum())
            loss = bce_loss(logits, yb, valid=vb,
                            pixel_weights=wb if use_weights else None)
            total += float(loss.data) * denom
            count += denom
    if count == 0:
        raise NumericError("validation set has no valid pixels")
    return total / count


def train(model: HyperspectralViT, train_samples: Sequence[Sample],
          val_samples: Sequence[Sample], config: TrainConfig,
          checkpoint_dir: str | Path | None = None,
          resume: bool = False, verbose: bool = False) -> TrainResult:
    """Minibatch Adam loop keeping the lowest-validation-loss checkpoint.

    With ``checkpoint_dir`` set, ``last.ckpt`` (parameters + optimizer state)
    is rewritten after every epoch and ``best.ckpt`` tracks the best
    validation loss; ``resume=True`` continues from ``last.ckpt``.
    """
    if not train_samples or not val_samples:
        raise DataError("train and validation sets must be non-empty")
    use_weights = config.mf_loss_weight
    if use_weights and any(s.weight is None for s in train_samples):
        raise DataError("mf_loss_weight requires a weight map on every train sample")
    if config.normalize_input and not resume:
        model.set_input_stats(*fit_input_stats(train_samples))

    if config.oversample_positives:
        sampler = WeightedSampler([s.has_positives for s in train_samples], config.seed)
        draw = lambda e: sampler.epoch(e, len(train_samples))
    else:
        draw = lambda e: np.random.default_rng(
            [config.seed, 0x5A, e]).permutation(len(train_samples))

    params = model.parameters()
    opt = Adam(params, lr=config.learning_rate)
    start_epoch = 0
    best_epoch, best_val = -1, float("inf")
    best_state: dict[str, np.ndarray] = {}
    train_losses: list[float] = []
    val_losses: list[float] = []

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if resume:
        if ckpt_dir is None or not (ckpt_dir / "last.ckpt").exists():
            raise DataError("resume requested but no last.ckpt found")
        arrays, _, extra = load_checkpoint(ckpt_dir / "last.ckpt")
        model.load_state_dict(
            {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
        for i, _ in enumerate(params):
            opt.state["m"][i] = arrays[f"opt.m.{i}"]
            opt.state["v"][i] = arrays[f"opt.v.{i}"]
        opt.state["t"] = int(extra["opt_t"])
        start_epoch = int(extra["epoch"]) + 1
        best_epoch = int(extra["best_epoch"])
        best_val = float(extra["best_val"])
        train_losses = list(extra["train_losses"])
        val_losses = list(extra["val_losses"])
        if (ckpt_dir / "best.ckpt").exists():
            best_arrays, _, _ = load_checkpoint(ckpt_dir / "best.ckpt")
            best_state = best_arrays

    for epoch in range(start_epoch, config.epochs):
        model.train()
        order = draw(epoch)
        epoch_loss, n_batches = 0.0, 0
        for batch_i, (xb, yb, vb, wb) in enumerate(
                _batches(train_samples, order, config.batch_size)):
            try:
                logits = model.full_logits(Tensor(xb))
                loss = bce_loss(logits, yb, valid=vb,
                                pixel_weights=wb if use_weights else None)
            except NumericError as exc:
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {batch_i}: {exc}") from exc
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.data)
            n_batches += 1
        model.eval()
        val = _dataset_loss(model, val_samples, config.batch_size, use_weights=False)
        train_losses.append(epoch_loss / max(n_batches, 1))
        val_losses.append(val)
        if verbose:
            print(f"epoch {epoch}: train {train_losses[-1]:.5f} val {val:.5f}")
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_state = model.state_dict()
            if ckpt_dir:
                save_checkpoint(ckpt_dir / "best.ckpt", best_state,
                                config=model.config.to_dict(),
                                extra={"epoch": epoch, "val_loss": val})
        if ckpt_dir:
            arrays = {f"model.{k}": v for k, v in model.state_dict().items()}
            for i, _ in enumerate(params):
                arrays[f"opt.m.{i}"] = opt.state["m"][i]
                arrays[f"opt.v.{i}"] = opt.state["v"][i]
            save_checkpoint(ckpt_dir / "last.ckpt", arrays,
                            config=model.config.to_dict(),
                            extra={"epoch": epoch, "opt_t": opt.state["t"],
                                   "best_epoch": best_epoch, "best_val": best_val,
                                   "train_losses": train_losses,
                                   "val_losses": val_losses,
                                   "train_config": config.to_dict()})

    if best_state:
        model.load_state_dict(best_state)
    return TrainResult(train_losses=train_losses, val_losses=val_losses,
                       best_epoch=best_epoch, best_val_loss=best_val,
                       best_state=best_state)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def infer(model: HyperspectralViT, cube: HyperCube, grid: TileGrid,
          batch_size: int = 16, threads: int = 1) -> np.ndarray:
    """Tile, forward, stitch: per-class probabilities at the cube's resolution.

    Logits are upsampled to tile resolution per the variant rule inside
    ``full_logits``, mean-stitched across overlaps, then passed through the
    sigmoid. Tile order does not affect the result.
    """
    model.eval()
    tiles = extract_tiles(cube, grid, pad_value=0.0)
    inputs = [np.ascontiguousarray(t.data.transpose(2, 0, 1)) for t in tiles]
    batches = [inputs[i : i + batch_size] for i in range(0, len(inputs), batch_size)]

    def run(batch):
        with no_grad():
            return model.full_logits(Tensor(np.stack(batch))).data

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, batches))
    else:
        outs = [run(b) for b in batches]
    logits = [tile for out in outs for tile in out]
    stitched = stitch(logits, grid)
    if stitched.ndim == 2:
        stitched = stitched[None]
    return T._sigmoid_np(stitched.astype(np.float32))
