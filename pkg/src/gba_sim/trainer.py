"""Training loop for the toy dual encoder under any aggregation strategy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cluster import StrategyConfig, make_topology, run_step
from .costmodel import CostLedger, HardwareModel, ledger_merge
from .encoder import DualEncoder, PairBatch, encode, init_encoder
from .losses import LossWeights, itc_loss
from .numerics import Matrix, as_matrix, make_rng, matmul
from .optim import OptimizerConfig, OptimizerState, optimizer_step
from .datapipe import SyntheticPairs

log = logging.getLogger(__name__)

RECALL_KS = (1, 5, 10)


@dataclass(frozen=True)
class TrainConfig:
    strategy: StrategyConfig
    world_size: int = 8
    steps: int = 200
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    full_objective: bool = False
    embed_dim: int = 16
    init_tau: float = 0.07
    patch_size: int = 4
    vocab: int = 8
    image_mask_ratio: float = 0.75
    text_mask_ratio: float = 0.50
    shuffle: bool = True
    hardware: HardwareModel = field(default_factory=HardwareModel)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if not self.optimizer.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.optimizer.learning_rate}")
        for name in ("image_mask_ratio", "text_mask_ratio"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        self.strategy.validate(self.world_size)


@dataclass
class StepRecord:
    step: int
    loss: float
    ag_bytes: int
    ar_bytes: int
    peak_rows: int
    sim_time: float


@dataclass
class MetricsHistory:
    records: list[StepRecord] = field(default_factory=list)
    ledger: CostLedger = field(default_factory=CostLedger)
    retrieval: dict[str, float] = field(default_factory=dict)
    eval_loss: float = float("nan")
    samples_seen: int = 0
    model: DualEncoder | None = None

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]


class PairSampler:
    """Deterministic stream of pair indices; reshuffles each pass when ``shuffle``."""

    def __init__(self, n: int, rng: np.random.Generator, shuffle: bool = True):
        self.n = n
        self.rng = rng
        self.shuffle = shuffle
        self._order = self._new_order()
        self._pos = 0

    def _new_order(self) -> np.ndarray:
        return self.rng.permutation(self.n) if self.shuffle else np.arange(self.n)

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self._pos == self.n:
                self._order = self._new_order()
                self._pos = 0
            chunk = self._order[self._pos:self._pos + count]
            out.append(chunk)
            self._pos += len(chunk)
            count -= len(chunk)
        return np.concatenate(out)


def random_mask(rng: np.random.Generator, rows: int, cols: int, ratio: float) -> np.ndarray:
    """Each row masks ``max(1, round(ratio * cols))`` positions chosen uniformly."""
    n_masked = max(1, int(round(ratio * cols)))
    mask = np.zeros((rows, cols), dtype=bool)
    for i in range(rows):
        mask[i, rng.choice(cols, size=n_masked, replace=False)] = True
    return mask


def make_micro_batches(config: TrainConfig, data: SyntheticPairs, sampler: PairSampler,
                       rng: np.random.Generator) -> list[list[PairBatch]]:
    s = config.strategy
    b = s.batch_per_worker
    d_in = data.x_img.shape[1]
    idx = sampler.take(s.accumulation_steps * config.world_size * b)
    out = []
    for step in range(s.accumulation_steps):
        per_worker = []
        for rank in range(config.world_size):
            start = (step * config.world_size + rank) * b
            rows = idx[start:start + b]
            img_mask = txt_mask = None
            if config.full_objective:
                img_mask = random_mask(rng, b, d_in // config.patch_size, config.image_mask_ratio)
                txt_mask = random_mask(rng, b, d_in, config.text_mask_ratio)
            per_worker.append(PairBatch(data.x_img[rows], data.x_txt[rows], img_mask, txt_mask))
        out.append(per_worker)
    return out


def train(config: TrainConfig, data: SyntheticPairs) -> MetricsHistory:
    """Run ``config.steps`` optimizer steps; fully determined by ``config.seed``."""
    rng = make_rng(config.seed)
    init_rng, data_rng, mask_rng = (make_rng(int(s)) for s in rng.integers(0, 2**63 - 1, size=3))
    d_in = data.x_img.shape[1]
    model = init_encoder(init_rng, d_in, config.embed_dim, config.init_tau,
                         aux=config.full_objective, patch_size=config.patch_size, vocab=config.vocab)
    topology = make_topology(config.world_size, config.strategy.group_size)
    sampler = PairSampler(len(data), data_rng, config.shuffle)
    opt_state = OptimizerState()
    weights = config.loss_weights if config.full_objective else None

    history = MetricsHistory()
    for step in range(config.steps):
        micro = make_micro_batches(config, data, sampler, mask_rng)
        result = run_step(config.strategy, topology, model, micro, config.hardware, weights)
        led = result.ledger
        history.records.append(StepRecord(step, result.loss_value, led.bytes_all_gather, led.bytes_all_reduce,
                                           led.peak_resident_rows, led.simulated_time))
        history.ledger = ledger_merge(history.ledger, led)
        params = optimizer_step(model.params(), result.grads, config.optimizer, opt_state)
        model = model.with_params(params)
        if step % 50 == 0:
            log.info("step %d loss %.6f", step, result.loss_value)

    history.samples_seen = config.steps * config.world_size * config.strategy.batch_per_worker \
        * config.strategy.accumulation_steps
    emb = encode(model, PairBatch(data.x_img, data.x_txt))
    history.retrieval = evaluate_retrieval(emb.v_cls, emb.t_cls)
    history.eval_loss = itc_loss(emb, model.temp, normalize=False).value
    history.model = model
    return history


def _positive_ranks(sim: Matrix) -> np.ndarray:
    """0-based rank of the diagonal entry in each row; ties go to the lower index."""
    n = sim.shape[0]
    pos = np.diag(sim)[:, None]
    cols = np.arange(n)[None, :]
    rows = np.arange(n)[:, None]
    ahead = (sim > pos) | ((sim == pos) & (cols < rows))
    return ahead.sum(axis=1)


def evaluate_retrieval(v, t, ks: tuple[int, ...] = RECALL_KS) -> dict[str, float]:
    """Recall@K in both directions plus their mean ``MR`` (all as fractions).

    Row ``i`` of ``v`` and ``t`` form the matching pair. K values larger than
    the number of candidates are skipped.
    """
    v = as_matrix(v, "v")
    t = as_matrix(t, "t")
    if v.shape[0] == 0:
        raise ValueError("retrieval needs at least one pair")
    if v.shape != t.shape:
        raise ValueError(f"embedding sets differ in shape: {v.shape} vs {t.shape}")
    sim = matmul(v, t.T)
    i2t = _positive_ranks(sim)
    t2i = _positive_ranks(sim.T)
    out = {}
    for k in ks:
        if k > v.shape[0]:
            continue
        out[f"i2t_R@{k}"] = float(np.mean(i2t < k))
        out[f"t2i_R@{k}"] = float(np.mean(t2i < k))
    out["MR"] = mean_recall(list(out.values()))
    return out


def mean_recall(recalls) -> float:
    return float(np.mean(recalls))


def itc_on_full_batch(model: DualEncoder, data: SyntheticPairs) -> float:
    return itc_loss(encode(model, PairBatch(data.x_img, data.x_txt)), model.temp, normalize=False).value

