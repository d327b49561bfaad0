"""Synchronous data-parallel training of the flood-filling network.

p workers run as threads, each owning a parameter replica, an Adam state, and
a disjoint shard of the training examples. The only synchronization point is
the ring allreduce: every step each worker computes gradients over its
mini-batch, the ring averages the flattened gradients (and the step's scalar
stats), and every worker applies the identical Adam update, so replicas stay
bit-identical. The effective batch is the sum of the per-worker mini-batches.

Per-example schedule: the object map starts at logit(0.05) with a single
logit(0.95) seed at the subvolume center; the first evaluation runs the FOV
centered there, feeds its logits back into the map, and then each of the six
neighbor positions (one delta step per axis, in fixed -z,+z,-y,+y,-x,+x
order) is evaluated too if, at its turn, the live object map's corresponding
FOV face reaches the movement threshold. Every evaluation is one optimizer
step and counts as one FOV of throughput; when a schedule is exhausted the
worker draws its next example.
"""

from __future__ import annotations

import hashlib
import threading
import os
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .collectives import ring_allgather_bytes, ring_allreduce
from .data import ShardSpec, TrainingSet, balanced_sampler
from .metrics import binary_confusion, confusion_scores
from .model import (
    FfnConfig,
    FfnParams,
    apply_pom_update,
    backward,
    forward,
    init_params,
    logit,
    save_checkpoint,
)
from .optim import AdamState, LrPolicy, adam_step, effective_lr
from .tensor_ops import sigmoid_ce_loss
from .transport import connect_tcp_ring, free_local_endpoints, make_inproc_ring

STATS_HEADER = "step,loss,acc,prec,rec,f1,fovs,wall_s"

# fixed direction order for training-time movement: (dz, dy, dx) unit steps
_DIRECTIONS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


class ConsistencyError(RuntimeError):
    """Replica parameter checksums diverged across ranks."""


class WorkerCrashError(RuntimeError):
    """A worker thread died; the message names its rank."""


@dataclass
class TrainItem:
    image: np.ndarray  # (F, F, F) normalized image crop
    pom: np.ndarray  # (F, F, F) object-map logits crop
    labels: np.ndarray  # (F, F, F) soft labels crop


class ExampleSchedule:
    """Training state of one drawn example: its object map and pending FOVs."""

    def __init__(self, example, fov_size: int, delta: int, move_threshold: float):
        s = example.image.shape[0]
        if s != fov_size + 2 * delta:
            raise ValueError(
                f"subvolume edge {s} must equal fov_size + 2*delta = "
                f"{fov_size + 2 * delta}"
            )
        self.image = example.image
        self.labels = example.mask
        self.fov_size = fov_size
        self.delta = delta
        self._move_cut = logit(move_threshold)
        self.pom = np.full((s, s, s), logit(0.05), dtype=np.float32)
        c = s // 2
        self.pom[c, c, c] = logit(0.95)
        self.center_origin = (delta, delta, delta)
        self.pos = self.center_origin
        self._candidates = deque(_DIRECTIONS)

    def _crop(self, arr: np.ndarray) -> np.ndarray:
        z, y, x = self.pos
        f = self.fov_size
        return arr[z : z + f, y : y + f, x : x + f]

    def fov_inputs(self) -> TrainItem:
        return TrainItem(
            image=self._crop(self.image),
            pom=self._crop(self.pom).copy(),
            labels=self._crop(self.labels),
        )

    def _face_max(self, direction) -> float:
        """Max object-map logit on the center FOV's face toward `direction`."""
        z0, y0, x0 = self.center_origin
        f = self.fov_size
        sl = [slice(z0, z0 + f), slice(y0, y0 + f), slice(x0, x0 + f)]
        for axis, d in enumerate(direction):
            if d < 0:
                sl[axis] = (z0, y0, x0)[axis]
            elif d > 0:
                sl[axis] = (z0, y0, x0)[axis] + f - 1
        return float(self.pom[tuple(sl)].max())

    def complete_step(self, logits: np.ndarray) -> bool:
        """Feed back the step's logits; returns True when the example is done."""
        apply_pom_update(self.pom, logits.astype(np.float32, copy=False), self.pos)
        while self._candidates:
            d = self._candidates.popleft()
            if self._face_max(d) >= self._move_cut:
                self.pos = tuple(
                    c + self.delta * step for c, step in zip(self.center_origin, d)
                )
                return False
        return True


@dataclass
class Replica:
    """One worker's complete training state."""

    config: FfnConfig
    params: FfnParams
    adam: AdamState
    policy: LrPolicy
    step: int = 0

    @classmethod
    def fresh(cls, config: FfnConfig, policy: LrPolicy, seed: int) -> "Replica":
        params = init_params(config, seed)
        adam = AdamState.zeros(params.num_params, dtype=config.dtype)
        return cls(config=config, params=params, adam=adam, policy=policy)

    def checksum(self) -> bytes:
        return hashlib.blake2b(
            self.params.flatten().tobytes(), digest_size=16
        ).digest()


@dataclass
class StepStats:
    step: int
    loss: float
    acc: float
    prec: float
    rec: float
    f1: float
    fovs: int  # FOVs processed this step, summed over workers


def sync_sgd_step(group, replica: Replica, batch) -> tuple[np.ndarray, StepStats]:
    """One synchronous step over this worker's mini-batch.

    Computes local gradients averaged over the batch, ring-averages them with
    every other rank, and applies one Adam step at the schedule's effective
    learning rate. Returns the batch logits (B, 1, F, F, F) for object-map
    feedback plus the step's globally aggregated stats. Identical on all
    ranks by construction.
    """
    images = np.stack([item.image for item in batch])
    poms = np.stack([item.pom for item in batch])
    labels = np.stack([item.labels for item in batch])[:, None]

    logits, cache = forward(replica.params, images, poms, keep_cols=True)
    loss, grad_logits = sigmoid_ce_loss(logits, labels.astype(logits.dtype))
    grads = backward(replica.params, cache, grad_logits).flatten()

    averaged = ring_allreduce(group, grads)

    tp, fp, tn, fn = binary_confusion(logits, labels)
    local_stats = np.array(
        [loss, tp, fp, tn, fn, len(batch)], dtype=np.float64
    )
    agg = ring_allreduce(group, local_stats) * group.size

    layout = FfnParams.flat_layout(replica.config)
    lr = effective_lr(replica.policy, replica.step)
    new_flat, replica.adam = adam_step(
        replica.params.flatten(), averaged, replica.adam, lr, layout
    )
    replica.params = FfnParams.from_flat(replica.config, new_flat)
    replica.step += 1

    acc, prec, rec, f1 = confusion_scores(*(agg[1:5]))
    stats = StepStats(
        step=replica.step - 1,
        loss=float(agg[0]) / group.size,
        acc=acc,
        prec=prec,
        rec=rec,
        f1=f1,
        fovs=int(round(agg[5])),
    )
    return logits, stats


@dataclass
class TrainSettings:
    workers: int = 1
    batch_per_worker: int = 1
    steps: int = 0
    seed: int = 0
    transport: str = "inproc"
    checkpoint_every: int = 0
    move_threshold: float = 0.9
    debug_replica_check: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.batch_per_worker < 1:
            raise ValueError("batch_per_worker must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.transport not in ("inproc", "tcp"):
            raise ValueError("transport must be 'inproc' or 'tcp'")
        if not 0.0 < self.move_threshold <= 1.0:
            raise ValueError("move_threshold must be in (0, 1]")


@dataclass
class TrainResult:
    stats: list
    checkpoints: list
    params: FfnParams
    stats_path: str | None = None
    wall_s: list = field(default_factory=list)  # cumulative, one per step


def _format_row(row: StepStats, cum_fovs: int, wall_s: float) -> str:
    return ",".join(
        [
            str(row.step),
            repr(row.loss),
            repr(row.acc),
            repr(row.prec),
            repr(row.rec),
            repr(row.f1),
            str(cum_fovs),
            repr(wall_s),
        ]
    )


def run_training(
    config: FfnConfig,
    policy: LrPolicy,
    train_set: TrainingSet,
    settings: TrainSettings,
) -> TrainResult:
    """Run the full synchronous training loop; rank 0 writes all artifacts.

    Emits stats rows (one per step) and checkpoints: every
    `checkpoint_every` steps when set, and always one at the final step
    (which for steps=0 is the initial parameters).
    """
    if train_set.subvol_size != config.train_subvol_size:
        raise ValueError(
            f"training set subvolume {train_set.subvol_size} does not match "
            f"fov_size + 2*delta = {config.train_subvol_size}"
        )
    if settings.out_dir:
        os.makedirs(settings.out_dir, exist_ok=True)
    p = settings.workers
    endpoints = None
    groups = None
    if settings.transport == "inproc":
        groups = make_inproc_ring(p)
    else:
        endpoints = free_local_endpoints(p)

    errors: list = []
    outputs: dict = {}

    def worker(rank: int):
        group = None
        try:
            if groups is not None:
                group = groups[rank]
            else:
                group = connect_tcp_ring(rank, endpoints)
            sampler = balanced_sampler(
                train_set, ShardSpec(rank, p), settings.seed
            )
            replica = Replica.fresh(config, policy, settings.seed)
            schedules = [
                ExampleSchedule(
                    next(sampler), config.fov_size, config.delta,
                    settings.move_threshold,
                )
                for _ in range(settings.batch_per_worker)
            ]

            rows = []
            walls = []
            ckpts = []
            cum_fovs = 0
            t0 = time.perf_counter()

            def checkpoint(step):
                path = os.path.join(settings.out_dir, f"ckpt_{step:07d}.ffnc")
                save_checkpoint(path, replica.params, step, replica.adam)
                ckpts.append(path)

            for step in range(settings.steps):
                batch = [s.fov_inputs() for s in schedules]
                logits, stats = sync_sgd_step(group, replica, batch)
                for i, sched in enumerate(schedules):
                    if sched.complete_step(logits[i, 0]):
                        schedules[i] = ExampleSchedule(
                            next(sampler), config.fov_size, config.delta,
                            settings.move_threshold,
                        )
                if settings.debug_replica_check:
                    sums = ring_allgather_bytes(group, replica.checksum())
                    if len(set(sums)) != 1:
                        raise ConsistencyError(
                            f"replica checksums diverged at step {step}: "
                            f"{[s.hex() for s in sums]}"
                        )
                if rank == 0:
                    cum_fovs += stats.fovs
                    rows.append(stats)
                    walls.append(time.perf_counter() - t0)
                    if (
                        settings.out_dir
                        and settings.checkpoint_every
                        and (step + 1) % settings.checkpoint_every == 0
                        and (step + 1) != settings.steps
                    ):
                        checkpoint(step + 1)

            if rank == 0:
                if settings.out_dir:
                    checkpoint(settings.steps)
                outputs["rows"] = rows
                outputs["walls"] = walls
                outputs["ckpts"] = ckpts
                outputs["params"] = replica.params
        except Exception as exc:  # noqa: BLE001 - reported with rank below
            errors.append((rank, exc))
            if group is not None:
                group.close()
        finally:
            if not errors and group is not None and settings.transport == "tcp":
                group.close()

    with threadpool_limits(limits=1):
        threads = [
            threading.Thread(target=worker, args=(r,), name=f"ffn-worker-{r}")
            for r in range(p)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    if errors:
        rank, exc = errors[0]
        raise WorkerCrashError(f"worker rank {rank} crashed: {exc!r}") from exc

    stats_path = None
    rows = outputs["rows"]
    walls = outputs["walls"]
    if settings.out_dir:
        stats_path = os.path.join(settings.out_dir, "stats.csv")
        cum = 0
        with open(stats_path, "w") as fh:
            fh.write(STATS_HEADER + "\n")
            for row, wall in zip(rows, walls):
                cum += row.fovs
                fh.write(_format_row(row, cum, wall) + "\n")
    return TrainResult(
        stats=rows,
        checkpoints=outputs["ckpts"],
        params=outputs["params"],
        stats_path=stats_path,
        wall_s=walls,
    )


@dataclass
class BenchRow:
    p: int
    fovs_per_s: float
    efficiency: float


def measure_throughput(
    config: FfnConfig,
    policy: LrPolicy,
    train_set: TrainingSet,
    *,
    workers: int,
    batch_per_worker: int,
    steps: int,
    warmup_steps: int,
    seed: int,
) -> float:
    """FOVs/s of a short training run, excluding the first warmup steps."""
    if steps <= warmup_steps:
        raise ValueError("steps must exceed warmup_steps")
    settings = TrainSettings(
        workers=workers,
        batch_per_worker=batch_per_worker,
        steps=steps,
        seed=seed,
    )
    result = run_training(config, policy, train_set, settings)
    fovs = [row.fovs for row in result.stats]
    cum_fovs = np.cumsum(fovs)
    span_fovs = int(cum_fovs[-1] - cum_fovs[warmup_steps - 1]) if warmup_steps else int(cum_fovs[-1])
    span_wall = result.wall_s[-1] - (result.wall_s[warmup_steps - 1] if warmup_steps else 0.0)
    return span_fovs / span_wall


def bench_scaling(
    config: FfnConfig,
    policy: LrPolicy,
    train_set: TrainingSet,
    p_list,
    *,
    batch_per_worker: int = 1,
    steps: int = 12,
    warmup_steps: int = 2,
    seed: int = 0,
) -> list:
    """Throughput and parallel efficiency per worker count.

    efficiency(p) = throughput(p) / (p * throughput(1)); the p=1 baseline is
    measured even when 1 is not in p_list.
    """
    throughput = {}
    for p in sorted(set(list(p_list) + [1])):
        throughput[p] = measure_throughput(
            config,
            policy,
            train_set,
            workers=p,
            batch_per_worker=batch_per_worker,
            steps=steps,
            warmup_steps=warmup_steps,
            seed=seed,
        )
    base = throughput[1]
    return [
        BenchRow(p=p, fovs_per_s=throughput[p], efficiency=throughput[p] / (p * base))
        for p in p_list
    ]


def smoothed_series(values, factor: float = 0.9) -> list:
    """Debiased exponential moving average (TensorBoard-style smoothing)."""
    out = []
    last = 0.0
    for t, v in enumerate(values, start=1):
        last = last * factor + (1.0 - factor) * float(v)
        out.append(last / (1.0 - factor**t))
    return out
