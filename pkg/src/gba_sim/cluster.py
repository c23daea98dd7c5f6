"""Single-process simulation of a data-parallel cluster computing the contrastive loss.

Workers are logical and iterated in rank order. Three aggregation strategies
share one executor:

* ``conventional``: one group spanning the world, one micro-step.
* ``grouped``: contiguous groups; gathers and negatives stay inside a group.
* ``gba``: grouped plus ``k`` accumulated micro-steps per optimizer step.

Gradient flow follows gather-with-gradient semantics. Every member of a group
computes the same loss over the gathered batch; the backward of the gather
reduce-scatters those identical replicas, which amounts to scaling a
member's own embedding-row gradients by the group size. One global all-reduce
then averages over the world, giving the exact gradient of the mean group
loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .costmodel import BYTES_PER_REAL, CostLedger, HardwareModel, peak_gathered_rows, reduce_bytes_per_member
from .encoder import DualEncoder, PairBatch, aux_losses, encode, encode_backward
from .losses import EmbeddingBatch, LossWeights, itc_loss
from .numerics import Matrix, ShapeError

log = logging.getLogger(__name__)


class StrategyKind(str, Enum):
    CONVENTIONAL = "conventional"
    GROUPED = "grouped"
    GBA = "gba"


@dataclass(frozen=True)
class Topology:
    world_size: int
    group_size: int
    groups: tuple[tuple[int, ...], ...]

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def group_of(self, rank: int) -> int:
        return rank // self.group_size


def make_topology(world_size: int, group_size: int) -> Topology:
    if world_size < 1 or group_size < 1:
        raise ValueError(f"world_size and group_size must be >= 1, got {world_size} and {group_size}")
    if world_size % group_size:
        raise ValueError(f"group_size {group_size} does not divide world_size {world_size}")
    groups = tuple(tuple(range(g, g + group_size)) for g in range(0, world_size, group_size))
    return Topology(world_size, group_size, groups)


@dataclass(frozen=True)
class StrategyConfig:
    kind: StrategyKind
    batch_per_worker: int
    group_size: int
    accumulation_steps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.batch_per_worker < 1 or self.group_size < 1 or self.accumulation_steps < 1:
            raise ValueError(f"batch, group and accumulation counts must be >= 1: {self}")
        if self.kind is not StrategyKind.GBA and self.accumulation_steps != 1:
            raise ValueError(f"{self.kind.value} runs exactly one micro-step, got {self.accumulation_steps}")

    def validate(self, world_size: int) -> None:
        if self.kind is StrategyKind.CONVENTIONAL and self.group_size != world_size:
            raise ValueError(f"conventional ITC gathers over the whole world ({world_size}), "
                             f"got group_size {self.group_size}")
        if world_size % self.group_size:
            raise ValueError(f"group_size {self.group_size} does not divide world_size {world_size}")

    @property
    def samples_per_loss(self) -> int:
        """Pairs contributing to one optimizer step's contrastive losses per group."""
        return self.group_size * self.batch_per_worker * self.accumulation_steps

    def label(self) -> str:
        return f"{self.kind.value}(B={self.batch_per_worker},m={self.group_size},k={self.accumulation_steps})"


def all_gather(topology: Topology, group_index: int, payloads: list[Matrix],
               ledger: CostLedger | None = None) -> list[Matrix]:
    """Every member of the group receives the rank-ordered row concatenation."""
    members = topology.groups[group_index]
    if len(payloads) != len(members):
        raise ShapeError(f"group {group_index} has {len(members)} members, got {len(payloads)} payloads")
    shape = payloads[0].shape
    for rank, p in zip(members, payloads):
        if p.shape != shape:
            raise ShapeError(f"payload of rank {rank} has shape {p.shape}, expected {shape}")
    if ledger is not None:
        ledger.record_gather(len(members), payloads[0].size * BYTES_PER_REAL)
    gathered = np.concatenate(payloads, axis=0)
    return [gathered.copy() for _ in members]


def all_reduce_sum(topology: Topology, per_worker_grads: list[dict[str, Matrix]],
                   ledger: CostLedger | None = None) -> list[dict[str, Matrix]]:
    """Elementwise sum over workers, accumulated in rank order."""
    if len(per_worker_grads) != topology.world_size:
        raise ShapeError(f"expected {topology.world_size} gradient sets, got {len(per_worker_grads)}")
    first = per_worker_grads[0]
    total = {name: np.array(g, dtype=np.float64, copy=True) for name, g in first.items()}
    for rank, grads in enumerate(per_worker_grads[1:], start=1):
        if grads.keys() != total.keys():
            raise ShapeError(f"rank {rank} gradient names {sorted(grads)} differ from {sorted(total)}")
        for name, g in grads.items():
            if g.shape != total[name].shape:
                raise ShapeError(f"rank {rank} gradient {name} has shape {g.shape}, expected {total[name].shape}")
            total[name] += g
    if ledger is not None:
        ledger.record_reduce(topology.world_size, sum(g.size for g in total.values()) * BYTES_PER_REAL)
    return [{name: g.copy() for name, g in total.items()} for _ in range(topology.world_size)]


@dataclass
class StepResult:
    loss_value: float
    accumulated_grads: list[dict[str, Matrix]]
    ledger: CostLedger
    itc_losses: list[float] = field(default_factory=list)
    similarity_rows: set[int] = field(default_factory=set)

    @property
    def grads(self) -> dict[str, Matrix]:
        return self.accumulated_grads[0]


def check_micro_batches(strategy: StrategyConfig, topology: Topology,
                        micro_batches: list[list[PairBatch]]) -> None:
    strategy.validate(topology.world_size)
    if strategy.group_size != topology.group_size:
        raise ValueError(f"strategy group_size {strategy.group_size} != topology group_size {topology.group_size}")
    if len(micro_batches) != strategy.accumulation_steps:
        raise ValueError(f"expected {strategy.accumulation_steps} micro-steps, got {len(micro_batches)}")
    for s, per_worker in enumerate(micro_batches):
        if len(per_worker) != topology.world_size:
            raise ValueError(f"micro-step {s} has {len(per_worker)} worker batches, world is {topology.world_size}")
        for rank, mb in enumerate(per_worker):
            if mb.size != strategy.batch_per_worker:
                raise ValueError(f"micro-step {s} rank {rank} has {mb.size} pairs, "
                                 f"expected {strategy.batch_per_worker}")


def run_step(strategy: StrategyConfig, topology: Topology, model: DualEncoder,
             micro_batches: list[list[PairBatch]], hw: HardwareModel | None = None,
             weights: LossWeights | None = None) -> StepResult:
    """One optimizer step's forward/backward and gradient synchronization.

    ``micro_batches[s][r]`` is worker ``r``'s batch at micro-step ``s``. When
    ``weights`` is given the encoder's auxiliary heads are trained too and the
    reported loss is the weighted combination.
    """
    check_micro_batches(strategy, topology, micro_batches)
    k = strategy.accumulation_steps
    m = topology.group_size
    b = strategy.batch_per_worker
    full = weights is not None
    ledger = CostLedger()
    ledger.observe_rows(peak_gathered_rows(strategy))

    names = list(model.params())
    shapes = {name: p.shape for name, p in model.params().items()}
    worker_grads = [{name: np.zeros(shapes[name]) for name in names} for _ in range(topology.world_size)]
    itc_values: list[float] = []
    aux_values: list[tuple[float, float]] = []
    sim_rows: set[int] = set()

    for s in range(k):
        local = [encode(model, mb) for mb in micro_batches[s]]
        if hw is not None:
            ledger.advance(b / hw.compute_rate)
        for g, members in enumerate(topology.groups):
            payloads = [np.hstack([local[r].v_cls, local[r].t_cls]) for r in members]
            gathered = all_gather(topology, g, payloads, ledger)
            for pos, rank in enumerate(members):
                d = local[rank].d
                batch = EmbeddingBatch(gathered[pos][:, :d], gathered[pos][:, d:])
                sim_rows.add(batch.n)
                res = itc_loss(batch, model.temp, normalize=False)
                if pos == 0:
                    itc_values.append(res.value)
                rows = slice(pos * b, (pos + 1) * b)
                g_v = m * res.grads["v_cls"][rows]
                g_t = m * res.grads["t_cls"][rows]
                acc = worker_grads[rank]
                raw = micro_batches[s][rank]
                if full:
                    mim, mlm, aux = aux_losses(model, raw, local[rank], weights)
                    aux_values.append((mim.value, mlm.value))
                    g_v = g_v + aux["v_cls"]
                    g_t = g_t + aux["t_cls"]
                    acc["w_mim"] += aux["w_mim"] / k
                    acc["w_mlm"] += aux["w_mlm"] / k
                for name, grad in encode_backward(model, raw, g_v, g_t).items():
                    acc[name] += grad / k
                acc["log_tau"][0, 0] += res.grad_log_tau / k
        if hw is not None:
            payload = 2 * b * model.d * BYTES_PER_REAL
            ledger.advance(hw.latency + (m - 1) * payload / hw.bandwidth)

    synced = all_reduce_sum(topology, worker_grads, ledger)
    world = topology.world_size
    for grads in synced:
        for name in grads:
            grads[name] /= world
    if hw is not None:
        ledger.advance(hw.latency + reduce_bytes_per_member(world, model.num_params() * BYTES_PER_REAL) / hw.bandwidth)

    loss_value = float(np.mean(itc_values))
    if full:
        mims, mlms = zip(*aux_values)
        loss_value += weights.alpha * float(np.mean(mims)) + weights.beta * float(np.mean(mlms))
    log.debug("%s step loss=%.6f gathers=%d", strategy.label(), loss_value, ledger.collective_count["all_gather"])
    return StepResult(loss_value, synced, ledger, itc_values, sim_rows)
