"""Training loop: Adam on cross-entropy, with DBT or uniform mini-batches.

Batch indices can be prefetched on a background thread; the sampler is only
ever touched by that one thread and the queue preserves order, so a prefetched
run is bit-identical to a serial one.
"""
import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from eval.metrics import EvalReport, evaluate

from ..autodiff import ops
from ..autodiff.optim import Adam
from ..autodiff.tensor import Graph, Tensor, backward, global_grad_norm
from ..data.cycles import CardiacCycle, stack_samples
from ..errors import ConfigurationError, DataError, NumericFailure
from ..model.branched_cnn import BranchedCnn, _validation_message
from ..observability.langfuse_client import observe
from .dbt import DomainQueueSet, UniformSampler, iterations_per_epoch, require_effective_batch_size

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    batch_size: int = 64
    epochs: int = 300
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    dbt: bool = True
    reference_domain: Optional[int] = None
    iterations_per_epoch: Optional[int] = None
    snapshot_every: int = 10
    prefetch: int = 2

    @model_validator(mode="after")
    def _check(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.iterations_per_epoch is not None and self.iterations_per_epoch < 1:
            raise ValueError("iterations_per_epoch must be >= 1")
        if self.lr <= 0 or self.epsilon <= 0 or not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("lr and epsilon must be positive, betas in (0, 1)")
        if self.snapshot_every < 1 or self.prefetch < 0:
            raise ValueError("snapshot_every must be >= 1 and prefetch >= 0")
        return self

    @classmethod
    def build(cls, **values) -> "TrainConfig":
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigurationError(_validation_message(e)) from None


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_sens: Optional[float] = None
    val_spec: Optional[float] = None
    val_macc: Optional[float] = None
    val_f1: Optional[float] = None
    per_domain_acc: Dict[int, float] = {}


@dataclass
class TrainTrace:
    iteration_losses: List[float] = field(default_factory=list)
    epochs: List[EpochRecord] = field(default_factory=list)

    def write_jsonl(self, path: str) -> str:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as f:
            for record in self.epochs:
                f.write(record.model_dump_json() + "\n")
        return path


@dataclass
class TrainResult:
    model: BranchedCnn
    trace: TrainTrace
    best_epoch: Optional[int]
    best_report: Optional[EvalReport]
    iterations_per_epoch: int
    batch_size_effective: int


class BatchPrefetcher:
    """Draws ``total`` batches from ``sampler`` on a worker thread into a bounded queue."""

    def __init__(self, sampler, batch_size: int, total: int, depth: int = 2):
        self.sampler, self.batch_size, self.total, self.depth = sampler, batch_size, total, depth
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(depth, 1))
        self._stop = threading.Event()
        self._thread = None

    def _produce(self):
        try:
            for _ in range(self.total):
                batch = self.sampler.next_batch(self.batch_size)
                while not self._stop.is_set():
                    try:
                        self._queue.put(batch, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
        except Exception as e:  # surfaced on the consumer side
            self._queue.put(e)

    def __iter__(self) -> Iterator[List[int]]:
        if self.depth == 0:
            for _ in range(self.total):
                yield self.sampler.next_batch(self.batch_size)
            return
        self._thread = threading.Thread(target=self._produce, name="batch-prefetch", daemon=True)
        self._thread.start()
        try:
            for _ in range(self.total):
                item = self._queue.get()
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.close()

    def close(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)


def _reference_count(cycles: Sequence[CardiacCycle], reference_domain: Optional[int]) -> int:
    domains = sorted({c.domain_id for c in cycles})
    ref = domains[0] if reference_domain is None else reference_domain
    count = sum(1 for c in cycles if c.domain_id == ref)
    if count == 0:
        raise ConfigurationError(f"reference domain {ref} has no training cycles; available domains: {domains}")
    return count


@observe(name="train")
def train(
    train_cycles: Sequence[CardiacCycle],
    model: BranchedCnn,
    config: Optional[TrainConfig] = None,
    dbt: Optional[bool] = None,
    val_cycles: Optional[Sequence[CardiacCycle]] = None,
    on_epoch_end: Optional[Callable[[int, BranchedCnn, Optional[EpochRecord]], None]] = None,
    on_batch: Optional[Callable[[int, List[int]], None]] = None,
) -> TrainResult:
    """Train in place and return the model with its loss/metric trace.

    Batch-norm running statistics are recomputed over the training set before
    every validation pass and at the end, so eval mode matches the trained
    weights. With validation cycles the parameters and statistics of the epoch
    with the best validation Macc are restored at the end. ``on_epoch_end`` is
    also called once with epoch 0 before the first update.
    """
    config = config or TrainConfig()
    dbt = config.dbt if dbt is None else dbt
    if not train_cycles:
        raise DataError("training set is empty")

    if dbt:
        sampler = DomainQueueSet.from_cycles(train_cycles, seed=config.seed)
        b_eff = require_effective_batch_size(config.batch_size, sampler.n_queues)
    else:
        sampler = UniformSampler(len(train_cycles), seed=config.seed)
        b_eff = config.batch_size
    iters = config.iterations_per_epoch or iterations_per_epoch(
        _reference_count(train_cycles, config.reference_domain), b_eff
    )
    logger.info(
        "Training %r on %d cycles: %s, B_eff=%d, %d iterations x %d epochs",
        model, len(train_cycles), "DBT" if dbt else "uniform sampling", b_eff, iters, config.epochs,
    )

    x_all = stack_samples(list(train_cycles))
    y_all = ops.one_hot([c.label.index for c in train_cycles], model.config.classes)
    params = model.trainable_parameters()
    optimizer = Adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon)
    model.set_dropout_seed(config.seed)
    trace = TrainTrace()
    best_epoch, best_report, best_state = None, None, None

    if on_epoch_end:
        on_epoch_end(0, model, None)

    batches = iter(BatchPrefetcher(sampler, config.batch_size, iters * config.epochs, config.prefetch))
    grad_norm = 0.0
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            epoch_losses = []
            for _ in range(iters):
                step += 1
                idx = next(batches)
                if on_batch:
                    on_batch(step, idx)
                optimizer.zero_grad()
                try:
                    with Graph() as graph:
                        loss = ops.cross_entropy(model.logits(Tensor(x_all[idx][:, None, :])), y_all[idx])
                    backward(graph, loss)
                    grad_norm = global_grad_norm(params)
                    if not np.isfinite(grad_norm):
                        raise NumericFailure("gradient is not finite")
                except NumericFailure as e:
                    raise NumericFailure(
                        f"training diverged at iteration {step} (epoch {epoch}): {e}; "
                        f"lr={config.lr}, last grad norm={grad_norm:.4g}"
                    ) from e
                optimizer.step()
                model.after_step()
                value = loss.item()
                trace.iteration_losses.append(value)
                epoch_losses.append(value)
                logger.debug("iteration %d loss %.5f grad norm %.4g", step, value, grad_norm)

            record = EpochRecord(epoch=epoch, train_loss=float(np.mean(epoch_losses)))
            if val_cycles:
                model.refresh_batchnorm_stats(x_all)
                report = evaluate(model, val_cycles)
                record = record.model_copy(update={
                    "val_sens": report.sensitivity,
                    "val_spec": report.specificity,
                    "val_macc": report.macc,
                    "val_f1": report.f1,
                    "per_domain_acc": report.per_domain_accuracy,
                })
                if best_report is None or report.macc > best_report.macc:
                    best_epoch, best_report, best_state = epoch, report, model.state_dict()
            trace.epochs.append(record)
            logger.info(
                "epoch %d/%d loss %.4f%s", epoch, config.epochs, record.train_loss,
                f" val Macc {record.val_macc:.4f}" if record.val_macc is not None else "",
            )
            if on_epoch_end:
                on_epoch_end(epoch, model, record)
    finally:
        batches.close()

    if best_state is not None:
        model.load_state_dict(best_state)
        logger.info("Restored epoch %d (val Macc %.4f)", best_epoch, best_report.macc)
    else:
        model.refresh_batchnorm_stats(x_all)
    model.eval()
    return TrainResult(model, trace, best_epoch, best_report, iters, b_eff)

