"""Adversarial training of the hypernetwork generator against the PatchGAN.

Per batch: one discriminator step on detached generator outputs, then one
generator step on ``g_loss + lambda_rec * l1``.  Random streams are keyed by
(seed, purpose, epoch, index) so batch assembly can run on a thread pool
without changing results.
"""

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from app.data import SamplePair, center_crop
from app.diffcore import Adam, Tensor, as_tensor, constant, gradients, no_grad
from app.diffcore import ops
from app.discriminator import Discriminator, inject_noise
from app.errors import ChannelMismatchError, CropError, DatasetError, ShapeError, TrainingDivergedError
from app.generator import Generator
from app.metrics import compare
from app.schemas import HISTORY_COLUMNS, RunHistory, RunRecord, TrainConfig

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.linr"
HISTORY_NAME = "history.csv"

# stream tags for np.random.default_rng([seed, tag, ...])
_INIT_G, _INIT_D, _SHUFFLE, _AUGMENT, _NOISE = range(5)

Scalar = Union[Tensor, float]


# losses

def discriminator_loss(logits_real: Tensor, logits_fake: Tensor) -> Tensor:
    if logits_real.shape != logits_fake.shape:
        raise ShapeError("gan_loss", f"logit maps differ: {logits_real.shape} vs {logits_fake.shape}")
    real = ops.mean(ops.sigmoid_cross_entropy_with_logits(as_tensor(logits_real), 1.0))
    fake = ops.mean(ops.sigmoid_cross_entropy_with_logits(as_tensor(logits_fake), 0.0))
    return ops.add(real, fake)


def generator_adversarial_loss(logits_fake: Tensor, mode: str = "nonsaturating") -> Tensor:
    """``nonsaturating``: -log D(s, G(s)).  ``minimax``: the literal log(1 - D(s, G(s)))."""
    logits_fake = as_tensor(logits_fake)
    if mode == "nonsaturating":
        return ops.mean(ops.sigmoid_cross_entropy_with_logits(logits_fake, 1.0))
    if mode == "minimax":
        return ops.mul(ops.mean(ops.sigmoid_cross_entropy_with_logits(logits_fake, 0.0)), -1.0)
    raise ValueError(f"unknown generator loss '{mode}'")


def gan_loss(logits_real: Tensor, logits_fake: Tensor, mode: str = "nonsaturating") -> Tuple[Tensor, Tensor]:
    return discriminator_loss(logits_real, logits_fake), generator_adversarial_loss(logits_fake, mode)


def rec_loss(pred: Tensor, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("rec_loss", f"prediction {pred.shape} and target {target.shape} differ")
    return ops.mean(ops.abs_(ops.sub(pred, target)))


def total_generator_objective(g_loss: Scalar, rec: Scalar, lambda_rec: float) -> Scalar:
    if lambda_rec < 0:
        raise ValueError("lambda_rec must be >= 0")
    if isinstance(g_loss, Tensor) or isinstance(rec, Tensor):
        return ops.add(as_tensor(g_loss), ops.mul(as_tensor(rec), float(lambda_rec)))
    return g_loss + lambda_rec * rec


# schedules

def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def noise_sigma(epoch: int, cfg: TrainConfig) -> float:
    """Linear anneal from ``noise_sigma`` at epoch 0 to 0 at the last epoch."""
    if cfg.epochs == 1:
        return cfg.noise_sigma
    return cfg.noise_sigma * (1.0 - epoch / (cfg.epochs - 1))


# augmentation

def augment(
    source: np.ndarray,
    target: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    mask: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Random crop then horizontal flip, identical for source, target and mask."""
    h, w = source.shape[-2:]
    ch, cw = cfg.crop_height, cfg.crop_width
    if ch > h or cw > w:
        raise CropError(f"crop {ch}x{cw} is larger than the image {h}x{w}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    flip = rng.random() < cfg.flip_prob
    window = (Ellipsis, slice(top, top + ch), slice(left, left + cw))
    out = [None if a is None else a[window] for a in (source, target, mask)]
    if flip:
        out = [None if a is None else a[..., ::-1] for a in out]
    return tuple(None if a is None else np.ascontiguousarray(a) for a in out)


# models

def build_models(cfg: TrainConfig) -> Tuple[Generator, Discriminator]:
    generator = Generator.from_config(cfg, np.random.default_rng([cfg.seed, _INIT_G]))
    discriminator = Discriminator(cfg.disc_config(), np.random.default_rng([cfg.seed, _INIT_D]))
    return generator, discriminator


def make_checkpoint(generator: Generator, discriminator: Discriminator, cfg: TrainConfig, epoch: int) -> Checkpoint:
    return Checkpoint(
        hypernet=generator.state_dict(),
        mlp_spec=generator.describe(),
        disc=discriminator.state_dict(),
        disc_config=discriminator.cfg.model_dump(mode="json"),
        config=cfg.model_dump(mode="json"),
        seed=cfg.seed,
        epoch=epoch,
    )


def load_models(path: Union[str, Path]) -> Tuple[Generator, Discriminator, Checkpoint]:
    ckpt = load_checkpoint(path)
    return ckpt.generator(), ckpt.discriminator(), ckpt


def probe_objective(
    generator: Generator,
    discriminator: Discriminator,
    sources: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
) -> float:
    """Generator objective on a fixed batch, without noise or augmentation."""
    with no_grad():
        fake = generator(sources)
        logits = discriminator(sources, fake)
        g_loss = generator_adversarial_loss(logits, cfg.generator_loss)
        value = total_generator_objective(g_loss, rec_loss(fake, targets), cfg.lambda_rec)
    return value.item()


def fixed_batch(pairs: Sequence[SamplePair], cfg: TrainConfig, count: int) -> Tuple[np.ndarray, np.ndarray]:
    chosen = pairs[:count]
    sources = np.stack([center_crop(p.source, cfg.crop_height, cfg.crop_width) for p in chosen])
    targets = np.stack([center_crop(p.target, cfg.crop_height, cfg.crop_width) for p in chosen])
    return sources, targets


@dataclass
class StepLosses:
    d_loss: float
    g_loss: float
    rec_loss: float


@dataclass
class TrainResult:
    history: RunHistory
    generator: Generator
    discriminator: Discriminator
    checkpoint_path: Optional[Path] = None
    history_path: Optional[Path] = None


def write_history(history: RunHistory, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for record in history.records:
            writer.writerow(record.model_dump())
    return path


def read_history(path: Union[str, Path]) -> RunHistory:
    with open(path, newline="", encoding="utf-8") as fh:
        return RunHistory(records=[RunRecord.model_validate(row) for row in csv.DictReader(fh)])


class Trainer:
    def __init__(
        self,
        cfg: TrainConfig,
        train_set: Sequence[SamplePair],
        val_set: Optional[Sequence[SamplePair]] = None,
        out_dir: Optional[Union[str, Path]] = None,
    ):
        if not train_set:
            raise DatasetError(None, "training set is empty")
        for pair in train_set:
            if pair.channels != cfg.in_channels:
                raise ChannelMismatchError(
                    f"sample '{pair.id}' has {pair.channels} source channels, config expects {cfg.in_channels}")
        self.cfg = cfg
        self.train_set = list(train_set)
        self.val_set = list(val_set) if val_set else []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.generator, self.discriminator = build_models(cfg)
        adam = dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        self.g_opt = Adam(self.generator.params, lr=cfg.lr, **adam)
        self.d_opt = Adam(self.discriminator.params, lr=cfg.lr, **adam)
        probe_pool = self.val_set or self.train_set
        self.probe_sources, self.probe_targets = fixed_batch(probe_pool, cfg, cfg.batch_size)
        self.history = RunHistory()
        logger.info(
            "grid %s: generator %d parameters (P=%d per cell), discriminator %d parameters",
            cfg.grid.label, self.generator.parameter_count, self.generator.layout.total,
            self.discriminator.parameter_count,
        )

    def _assemble(self, epoch: int, indices: Sequence[int], pool: Optional[ThreadPoolExecutor]):
        def one(index: int):
            pair = self.train_set[index]
            rng = np.random.default_rng([self.cfg.seed, _AUGMENT, epoch, index])
            return augment(pair.source, pair.target, self.cfg, rng)

        crops = list(pool.map(one, indices)) if pool is not None else [one(i) for i in indices]
        return np.stack([c[0] for c in crops]), np.stack([c[1] for c in crops])

    def _check(self, value: float, epoch: int, batch: int, name: str) -> float:
        if not math.isfinite(value):
            raise TrainingDivergedError(epoch, batch, name, value)
        return value

    def train_step(
        self,
        sources: np.ndarray,
        targets: np.ndarray,
        sigma: float,
        rng: np.random.Generator,
        epoch: int = 0,
        batch: int = 0,
    ) -> StepLosses:
        cfg = self.cfg
        d_source = inject_noise(sources, sigma, rng) if cfg.noise_on_source else sources
        fake = self.generator(sources)

        # discriminator step on detached fakes
        real_in = inject_noise(targets, sigma, rng)
        fake_in = inject_noise(fake.data, sigma, rng)
        d_loss = discriminator_loss(
            self.discriminator(d_source, constant(real_in)),
            self.discriminator(d_source, constant(fake_in)),
        )
        self._check(d_loss.item(), epoch, batch, "d_loss")
        self.d_opt.step(gradients(d_loss, self.discriminator.params))

        # generator step
        logits = self.discriminator(d_source, inject_noise(fake, sigma, rng))
        g_loss = generator_adversarial_loss(logits, cfg.generator_loss)
        rec = rec_loss(fake, targets)
        objective = total_generator_objective(g_loss, rec, cfg.lambda_rec)
        self._check(objective.item(), epoch, batch, "g_loss")
        self.g_opt.step(gradients(objective, self.generator.params))
        return StepLosses(d_loss=d_loss.item(), g_loss=g_loss.item(), rec_loss=rec.item())

    def validate(self) -> Tuple[float, float, float]:
        # training pairs stand in when no validation split was given
        pairs = (self.val_set or self.train_set)[: self.cfg.val_samples]
        sources, targets = fixed_batch(pairs, self.cfg, len(pairs))
        preds = self.generator.translate(sources, batch_size=self.cfg.batch_size)
        scores = [compare(p, t) for p, t in zip(preds, targets)]
        psnrs = [s["psnr"] for s in scores if math.isfinite(s["psnr"])]
        return (
            float(np.mean([s["mse"] for s in scores])),
            float(np.mean([s["ssim"] for s in scores])),
            float(np.mean(psnrs)) if psnrs else math.inf,
        )

    def run_epoch(self, epoch: int, pool: Optional[ThreadPoolExecutor]) -> RunRecord:
        cfg = self.cfg
        lr = lr_schedule(epoch, cfg)
        sigma = noise_sigma(epoch, cfg)
        self.g_opt.lr = self.d_opt.lr = lr
        order = np.random.default_rng([cfg.seed, _SHUFFLE, epoch]).permutation(len(self.train_set))
        losses: List[StepLosses] = []
        for batch, start in enumerate(range(0, len(order), cfg.batch_size)):
            sources, targets = self._assemble(epoch, order[start:start + cfg.batch_size], pool)
            rng = np.random.default_rng([cfg.seed, _NOISE, epoch, batch])
            losses.append(self.train_step(sources, targets, sigma, rng, epoch, batch))
        val_mse, val_ssim, val_psnr = self.validate()
        objective = probe_objective(self.generator, self.discriminator, self.probe_sources, self.probe_targets, cfg)
        return RunRecord(
            epoch=epoch,
            d_loss=float(np.mean([s.d_loss for s in losses])),
            g_loss=float(np.mean([s.g_loss for s in losses])),
            rec_loss=float(np.mean([s.rec_loss for s in losses])),
            val_mse=val_mse,
            val_ssim=val_ssim,
            val_psnr=val_psnr,
            lr=lr,
            sigma=sigma,
            objective=objective,
            wall_clock=0.0,
        )

    def fit(self) -> TrainResult:
        cfg = self.cfg
        started = time.perf_counter()
        # deterministic mode assembles batches on the calling thread
        threaded = cfg.workers > 1 and not cfg.deterministic
        pool = ThreadPoolExecutor(max_workers=cfg.workers) if threaded else None
        result = TrainResult(history=self.history, generator=self.generator, discriminator=self.discriminator)
        try:
            for epoch in range(cfg.epochs):
                record = self.run_epoch(epoch, pool)
                record.wall_clock = time.perf_counter() - started
                self.history.records.append(record)
                logger.info(
                    "epoch %d/%d d=%.4f g=%.4f rec=%.4f val_mse=%.5f val_ssim=%.4f lr=%.2e sigma=%.3f",
                    epoch + 1, cfg.epochs, record.d_loss, record.g_loss, record.rec_loss,
                    record.val_mse, record.val_ssim, record.lr, record.sigma,
                )
                if self.out_dir is not None:
                    result.checkpoint_path = save_checkpoint(
                        self.out_dir / CHECKPOINT_NAME,
                        make_checkpoint(self.generator, self.discriminator, cfg, epoch + 1),
                    )
                    result.history_path = write_history(self.history, self.out_dir / HISTORY_NAME)
        finally:
            if pool is not None:
                pool.shutdown()
        return result


def train(
    cfg: TrainConfig,
    train_set: Sequence[SamplePair],
    val_set: Optional[Sequence[SamplePair]] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    return Trainer(cfg, train_set, val_set, out_dir).fit()
