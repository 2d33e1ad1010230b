"""Single-task and shared-encoder multi-task training.

Multi-task training pre-trains one general model on the union of small
per-scenario training sets, then fine-tunes a decoder per scenario with the
encoder frozen.  Frozen layers run in inference mode, so the encoder
(including its batch-norm statistics) is returned bit-for-bit unchanged.
"""
from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import nn
from .channels import ScenarioDataset
from .errors import ConfigError
from .models import DECODER, ENCODER, CompressionConfig, FeedbackModel, build_model, to_network
from .transforms import denormalize, nmse

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 200
    epochs: int = 1000
    seed: int = 0
    shuffle: bool = True
    validate_every: int = 0  # epochs between validation-loss checks, 0 = never

    def __post_init__(self):
        bad = []
        if not self.learning_rate > 0:
            bad.append(f"learning_rate={self.learning_rate}")
        if self.batch_size < 1:
            bad.append(f"batch_size={self.batch_size}")
        if self.epochs < 0:
            bad.append(f"epochs={self.epochs}")
        if self.seed < 0:
            bad.append(f"seed={self.seed}")
        if self.validate_every < 0:
            bad.append(f"validate_every={self.validate_every}")
        if bad:
            raise ConfigError("invalid training config: " + ", ".join(bad))


@dataclass
class TrainResult:
    model: FeedbackModel
    losses: list = field(default_factory=list)  # mean training loss per epoch
    val_losses: dict = field(default_factory=dict)  # epoch -> validation loss
    seconds: float = 0.0
    log_rows: list = field(default_factory=list)  # (epoch, loss, elapsed seconds)

    @property
    def decoder(self) -> dict:
        return self.model.subset(DECODER)

    @property
    def encoder(self) -> dict:
        return self.model.subset(ENCODER)


@dataclass
class CombinedDataset:
    samples: np.ndarray
    labels: np.ndarray  # index into ``scenarios``
    scenarios: list
    provenance: list  # (scenario id, count)

    def __len__(self):
        return len(self.samples)


def combine_datasets(datasets, seed: int, take: int | None = None) -> CombinedDataset:
    """Seeded shuffle of the (first ``take``) training samples of each dataset."""
    datasets = list(datasets)
    if not datasets:
        raise ConfigError("combine_datasets needs at least one dataset")
    arrays = []
    for ds in datasets:
        arr = ds.train if isinstance(ds, ScenarioDataset) else np.asarray(ds)
        if take is not None:
            if take > len(arr):
                raise ConfigError(f"asked for {take} samples, dataset has {len(arr)}")
            arr = arr[:take]
        arrays.append(arr)
    shapes = {a.shape[1:] for a in arrays}
    if len(shapes) != 1:
        raise nn.ShapeError(f"datasets disagree on sample dims: {sorted(shapes)}")
    names = [ds.scenario if isinstance(ds, ScenarioDataset) else f"set{i}"
             for i, ds in enumerate(datasets)]
    samples = np.concatenate(arrays)
    labels = np.concatenate([np.full(len(a), i) for i, a in enumerate(arrays)])
    order = np.random.default_rng(seed).permutation(len(samples))
    return CombinedDataset(samples[order], labels[order], names,
                           [(n, len(a)) for n, a in zip(names, arrays)])


def _fit(model: FeedbackModel, data, cfg: TrainConfig, frozen=(), val=None, tag="train"):
    data = np.asarray(data)
    if len(data) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if data.shape[1:] != model.cfg.sample_shape:
        raise nn.ShapeError(f"data samples {data.shape[1:]} vs model {model.cfg.sample_shape}")
    x = to_network(data)
    xv = to_network(val) if val is not None and len(val) else None
    frozen = frozenset(frozen)
    stack = model.stack
    params = dict(model.params)
    trainable = [n for n in nn.param_shapes(stack) if n not in frozen]
    state = nn.adam_init(params, lr=cfg.learning_rate, names=trainable)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)
    start = time.perf_counter()
    n, bs = len(x), cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for i in range(0, n, bs):
            batch = x[order[i : i + bs]]
            loss, grads, updates = nn.value_and_grad(stack, params, batch, batch, frozen)
            params, state = nn.adam_step(params, grads, state)
            params.update(updates)
            total += loss * len(batch)
        result.losses.append(total / n)
        elapsed = time.perf_counter() - start
        result.log_rows.append((epoch, total / n, elapsed))
        if xv is not None and cfg.validate_every and epoch % cfg.validate_every == 0:
            result.val_losses[epoch] = nn.loss_mse(_predict(stack, params, xv), xv)
        log.debug("%s epoch %d loss %.6g (%.1fs)", tag, epoch, total / n, elapsed)
    result.seconds = time.perf_counter() - start
    result.model = model.with_params(params)
    return result


def _predict(stack, params, x, batch_size=500):
    return np.concatenate(
        [nn.forward(stack, params, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    )


def pretrain(model: FeedbackModel, data, cfg: TrainConfig, val=None) -> TrainResult:
    """Train every parameter on the combined multi-scenario set."""
    samples = data.samples if isinstance(data, CombinedDataset) else data
    return _fit(model, samples, cfg, val=val, tag="pretrain")


def finetune(model: FeedbackModel, data, cfg: TrainConfig, val=None) -> TrainResult:
    """Update only the decoder; the encoder is frozen and left untouched."""
    frozen = [n for n in model.names(ENCODER, trainable_only=True)]
    result = _fit(model, data, cfg, frozen=frozen, val=val, tag="finetune")
    for name in model.names(ENCODER):
        if result.model.params[name] is not model.params[name]:
            raise AssertionError(f"encoder tensor {name!r} changed during fine-tuning")
    return result


def train_single_task(cfg_model: CompressionConfig, data, cfg: TrainConfig, val=None,
                      init_seed: int | None = None, architecture="csinet") -> TrainResult:
    """Train a fresh model on one scenario's full training set."""
    model = build_model(cfg_model, seed=cfg.seed if init_seed is None else init_seed,
                        architecture=architecture)
    return _fit(model, data, cfg, val=val, tag="single")


def evaluate(model: FeedbackModel, test, scale: float | None = None, oracle: bool = False,
             batch_size: int = 500) -> tuple[float, float]:
    """NMSE ``(linear, dB)`` of reconstructing ``test`` in inference mode.

    ``test`` is a :class:`ScenarioDataset` (its test split) or an array of
    normalized samples.  NMSE is scale-invariant, so without a known
    normalization scale a unit scale is used.  ``oracle=True`` skips the
    network and feeds the reference through, a debugging path.
    """
    if isinstance(test, ScenarioDataset):
        scale = test.scale if scale is None else scale
        test = test.test
    test = np.asarray(test)
    if len(test) == 0:
        raise ConfigError("cannot evaluate on an empty test set")
    scale = 0.5 if scale is None else scale
    recon = test if oracle else model.reconstruct(test, batch_size=batch_size)
    return nmse(denormalize(test, scale), denormalize(recon, scale))


def cell_seed(seed: int, *key) -> int:
    """Seed for one grid cell, independent of the order cells run in."""
    parts = [int(seed)] + [zlib.crc32(str(k).encode()) for k in key]
    return int(np.random.SeedSequence(parts).generate_state(1, np.uint32)[0])


def cr_label(cr: Fraction) -> str:
    return f"{cr.numerator}/{cr.denominator}"
