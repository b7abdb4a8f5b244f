"""Deterministic N-worker synchronous data-parallel SGD.

Each round every worker computes a gradient on its next local mini-batch,
compresses it layer by layer with error feedback, and uploads the message.
The coordinator averages the decompressed messages in a fixed pairwise order,
applies a Nesterov-momentum step, and feeds the applied gradient to the
Accordion controller. Communication is counted as the scalars uploaded by all
workers over all rounds.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import controller
from .compressor import CompressorState, Level, compress, decompress, validate_level
from .controller import AccordionConfig
from .errors import ConfigError, DivergenceError, NumericError, ProtocolError
from .linalg import norm2
from .model import Dataset, Model, evaluate, loss_and_grad, shard_indices

logger = logging.getLogger(__name__)

THREADS_ENV = "ACCORDION_THREADS"
CSV_HEADER = ("epoch", "train_loss", "eval_metric", "lr", "levels", "floats_cumulative", "iters_cumulative")
WHOLE_MODEL = "model"


@dataclass(frozen=True)
class TrainConfig:
    workers: int
    epochs: int
    batch_per_worker: int
    base_lr: float
    warmup_epochs: int = 5
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 10.0
    momentum: float = 0.9
    nesterov: bool = True
    accordion: AccordionConfig | None = None
    static_level: Level | None = None
    seed: int = 0
    # per-worker batch at which base_lr applies; defaults to batch_per_worker,
    # giving a post-warmup rate of base_lr * workers
    reference_batch: int | None = None
    threads: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if (self.accordion is None) == (self.static_level is None):
            raise ConfigError("exactly one of accordion and static_level must be set")
        if self.workers < 1 or self.epochs < 1 or self.batch_per_worker < 1:
            raise ConfigError("workers, epochs and batch_per_worker must be positive")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay_epochs must be strictly increasing")
        if any(e >= self.epochs or e < 0 for e in self.decay_epochs):
            raise ConfigError("decay_epochs must lie inside the run")
        if self.decay_factor <= 1.0:
            raise ConfigError("decay_factor must exceed 1")

    @property
    def batch_mode(self) -> bool:
        if self.accordion is not None:
            return self.accordion.mode == "batchsize"
        return self.static_level.scheme == "batchsize"

    def initial_batch(self) -> int:
        if self.accordion is not None and self.batch_mode:
            return int(controller.initial_level(self.accordion).value)
        if self.static_level is not None and self.batch_mode:
            return int(self.static_level.value)
        return self.batch_per_worker


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    eval_metric: float
    lr: float
    levels: str
    floats_cumulative: int
    iters_cumulative: int
    grad_norm: float = 0.0
    batch_per_worker: int = 0
    rounds: int = 0
    unit_levels: dict = field(default_factory=dict, repr=False)

    def csv_fields(self) -> list[str]:
        return [
            str(self.epoch),
            repr(self.train_loss),
            repr(self.eval_metric),
            repr(self.lr),
            self.levels,
            str(self.floats_cumulative),
            str(self.iters_cumulative),
        ]


@dataclass
class RunResult:
    model: Model
    metrics: list[MetricsRow]
    checkpoints: list[Model] = field(default_factory=list)

    def __iter__(self):
        return iter((self.model, self.metrics))


def lr_schedule(epoch: int, config: TrainConfig, current_batch: int | None = None) -> float:
    """Warmup to a batch-scaled target, then step decay.

    The target is ``base_lr * current_batch * workers / reference_batch``; the
    first ``warmup_epochs`` epochs interpolate linearly from ``base_lr``.
    """
    batch = config.batch_per_worker if current_batch is None else current_batch
    ref = config.reference_batch or config.batch_per_worker
    target = config.base_lr * batch * config.workers / ref
    if config.warmup_epochs > 0 and epoch < config.warmup_epochs:
        lr = config.base_lr + (target - config.base_lr) * epoch / config.warmup_epochs
    else:
        lr = target
    passed = sum(1 for d in config.decay_epochs if epoch >= d)
    return lr / config.decay_factor**passed


def level_summary(unit_levels: dict) -> str:
    """Run-length encode unit levels in unit order, e.g. ``r2*2;r1*2``."""
    runs: list[list] = []
    for lvl in unit_levels.values():
        tok = lvl.token()
        if runs and runs[-1][0] == tok:
            runs[-1][1] += 1
        else:
            runs.append([tok, 1])
    return ";".join(f"{t}*{c}" for t, c in runs)


def _tree_sum(arrays: list[np.ndarray]) -> np.ndarray:
    arrays = list(arrays)
    while len(arrays) > 1:
        nxt = [arrays[i] + arrays[i + 1] for i in range(0, len(arrays) - 1, 2)]
        if len(arrays) % 2:
            nxt.append(arrays[-1])
        arrays = nxt
    return arrays[0]


def aggregate(messages: list[dict], shapes: dict) -> dict[str, np.ndarray]:
    """Average decompressed per-layer messages over workers.

    ``messages[i]`` maps layer name to worker ``i``'s message. The summation
    order is a fixed pairwise tree over worker index, so the result is
    bit-reproducible.
    """
    if not messages:
        raise ProtocolError("no worker messages to aggregate")
    out = {}
    for name, shape in shapes.items():
        parts = []
        for i, msgs in enumerate(messages):
            if msgs is None or name not in msgs:
                raise ProtocolError(f"worker {i} sent no message for layer {name!r}")
            parts.append(decompress(msgs[name], shape))
        out[name] = _tree_sum(parts) / len(parts)
    return out


def _worker_step(model: Model, data: Dataset, idx: np.ndarray, levels: dict, state: CompressorState):
    loss, grads = loss_and_grad(model, data.features[idx], data.labels[idx])
    msgs = {}
    for name, g in grads.items():
        msg, state = compress(g, levels[name], state, name)
        msgs[name] = msg
    return loss, msgs, state


def _thread_count(config: TrainConfig) -> int:
    if config.threads is not None:
        return max(1, config.threads)
    return max(1, int(os.environ.get(THREADS_ENV, "1")))


def run(
    config: TrainConfig,
    model: Model,
    dataset: Dataset,
    eval_data: Dataset | None = None,
    keep_checkpoints: bool = False,
) -> RunResult:
    """Train ``model`` on ``dataset``; return the final model and one metrics row per epoch."""
    n, workers = len(dataset), config.workers
    eval_data = dataset if eval_data is None else eval_data
    model = model.copy()
    shapes = model.shapes()
    acc_cfg = config.accordion

    for lvl in ([acc_cfg.level_low, acc_cfg.level_high] if acc_cfg else [config.static_level]):
        validate_level(lvl, shapes)
    if n < workers * config.initial_batch():
        raise ConfigError(f"dataset of {n} cannot feed {workers} workers at batch {config.initial_batch()}")

    if acc_cfg is not None:
        units = [WHOLE_MODEL] if config.batch_mode else list(shapes)
        acc_state = controller.init_state(acc_cfg, units)
    else:
        acc_state = None

    shards = shard_indices(n, workers)
    rng = np.random.default_rng([config.seed, 0x5EED])
    states = [CompressorState(seed=int(np.random.SeedSequence([config.seed, i]).generate_state(1)[0])) for i in range(workers)]
    velocity = {k: np.zeros(s) for k, s in shapes.items()}
    floats = 0
    iters_total = 0
    metrics: list[MetricsRow] = []
    checkpoints: list[Model] = []
    pool = ThreadPoolExecutor(_thread_count(config)) if _thread_count(config) > 1 else None

    try:
        for epoch in range(config.epochs):
            if acc_state is not None and config.batch_mode:
                batch = int(acc_state.levels[WHOLE_MODEL].value)
                unit_levels = dict(acc_state.levels)
                layer_levels = {k: Level("dense") for k in shapes}
            elif acc_state is not None:
                batch = config.batch_per_worker
                unit_levels = dict(acc_state.levels)
                layer_levels = unit_levels
            else:
                batch = int(config.static_level.value) if config.batch_mode else config.batch_per_worker
                layer_levels = {k: config.static_level for k in shapes}
                unit_levels = {WHOLE_MODEL: config.static_level} if config.batch_mode else layer_levels
            lr = lr_schedule(epoch, config, batch)
            rounds = n // (workers * batch)
            if rounds == 0:
                raise ConfigError(f"batch {batch} x {workers} workers exceeds the dataset of {n}")
            perms = [rng.permutation(s) for s in shards]
            epoch_loss = 0.0
            epoch_sum = {k: np.zeros(s) for k, s in shapes.items()}

            for it in range(rounds):
                batches = [p[it * batch : (it + 1) * batch] for p in perms]
                try:
                    if pool is None:
                        results = [_worker_step(model, dataset, b, layer_levels, s) for b, s in zip(batches, states)]
                    else:
                        futs = [pool.submit(_worker_step, model, dataset, b, layer_levels, s) for b, s in zip(batches, states)]
                        results = [f.result() for f in futs]
                except NumericError as exc:
                    raise DivergenceError(epoch, it) from exc
                losses = [r[0] for r in results]
                states = [r[2] for r in results]
                msgs = [r[1] for r in results]
                round_loss = float(_tree_sum(np.array(losses)[:, None])[0]) / workers
                if not np.isfinite(round_loss):
                    raise DivergenceError(epoch, it, round_loss)
                epoch_loss += round_loss
                floats += sum(m.float_count for wm in msgs for m in wm.values())

                applied = aggregate(msgs, shapes)
                for name, g in applied.items():
                    epoch_sum[name] += g
                    if config.momentum:
                        velocity[name] = config.momentum * velocity[name] + g
                        step = g + config.momentum * velocity[name] if config.nesterov else velocity[name]
                    else:
                        step = g
                    model.layers[name] = model.layers[name] - lr * step
                    if not np.all(np.isfinite(model.layers[name])):
                        raise DivergenceError(epoch, it)
                if acc_state is not None:
                    if config.batch_mode:
                        acc_state = controller.accumulate(acc_state, WHOLE_MODEL, np.concatenate([g.ravel() for g in applied.values()]))
                    else:
                        for name, g in applied.items():
                            acc_state = controller.accumulate(acc_state, name, g)
                iters_total += 1

            grad_norm = norm2(np.concatenate([v.ravel() for v in epoch_sum.values()]))
            metrics.append(
                MetricsRow(
                    epoch=epoch,
                    train_loss=epoch_loss / rounds,
                    eval_metric=evaluate(model, eval_data),
                    lr=lr,
                    levels=level_summary(unit_levels),
                    floats_cumulative=floats,
                    iters_cumulative=iters_total,
                    grad_norm=grad_norm,
                    batch_per_worker=batch,
                    rounds=rounds,
                    unit_levels=unit_levels,
                )
            )
            if keep_checkpoints:
                checkpoints.append(model.copy())
            logger.debug("epoch %d loss %.6g lr %.4g levels %s", epoch, epoch_loss / rounds, lr, metrics[-1].levels)

            if acc_state is not None:
                lr_next = lr_schedule(epoch + 1, config, batch) if epoch + 1 < config.epochs else lr
                acc_state, _ = controller.end_of_epoch(acc_state, acc_cfg, lr, lr_next, epoch)
    finally:
        if pool is not None:
            pool.shutdown()

    return RunResult(model, metrics, checkpoints)
