"""k-fold training loop: adaptive-moment updates with decoupled weight decay,
per-fold bin edges (computed from training-fold uncensored samples only),
per-sample steps (batch size fixed at 1), and held-out prediction tables.

Determinism contract: (seed, config, dataset) fully determine every parameter
after training. Parameter init and fusion draws consume a per-fold generator
seeded [seed, fold]; the shuffle order is reseeded per epoch from
[seed, fold, epoch].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from .data import BinEdges, SampleRecord, assign_bin, compute_bin_edges
from .errors import ConfigError, NumericsError
from .losses import balance_loss, decouple_loss, survival_nll, total_loss
from .model import HDMoEParams, ModelConfig, forward, lift_params, named_params

log = logging.getLogger("hdmoe.trainer")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-3
    epochs: int = 30
    batch_size: int = 1
    alpha: float = 1.0
    beta: float = 0.01
    seed: int = 0
    k_folds: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    distance_metric: str = "cos"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size != 1:
            raise ConfigError("batch size is fixed at 1")


@dataclass
class OptimizerState:
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def optimizer_step(
    params: HDMoEParams,
    grads: dict[str, np.ndarray | None],
    state: OptimizerState,
    cfg: TrainConfig,
) -> None:
    """In-place adaptive-moment update with bias correction; weight decay is
    decoupled and applied before the adaptive part."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for path, arr in named_params(params):
        g = grads.get(path)
        if g is None:
            g = np.zeros_like(arr)
        if g.shape != arr.shape:
            raise ConfigError(f"gradient shape {g.shape} != param shape {arr.shape} at {path}")
        if cfg.weight_decay:
            arr -= cfg.lr * cfg.weight_decay * arr
        m = state.first.setdefault(path, np.zeros_like(arr))
        v = state.second.setdefault(path, np.zeros_like(arr))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        arr -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_opt)


@dataclass
class FoldResult:
    fold: int
    params: HDMoEParams
    edges: BinEdges
    loss_curve: list[float]  # per-epoch mean total loss
    log_rows: list[str]  # run-log lines: loss CSV + rfr draw lines


@dataclass
class PredictionRow:
    sample_id: str
    fold: int
    hazards: np.ndarray
    risk: float
    bin_label: int
    censored: int
    time_months: float


def split_fold(records: list[SampleRecord], fold_id: int) -> tuple[list[SampleRecord], list[SampleRecord]]:
    train = [r for r in records if r.fold != fold_id]
    test = [r for r in records if r.fold == fold_id]
    return train, test


def train_fold(
    records: list[SampleRecord],
    fold_id: int,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> FoldResult:
    train_records, test_records = split_fold(records, fold_id)
    if not test_records:
        raise ConfigError(f"fold {fold_id} does not exist in the dataset")
    if not train_records:
        raise ConfigError(f"fold {fold_id}: empty training split")

    edges = compute_bin_edges(train_records, model_cfg.num_bins)
    train_records = [
        replace(r, bin_label=assign_bin(r.time_months, edges)) for r in train_records
    ]

    fold_rng = np.random.default_rng([train_cfg.seed, fold_id])
    params = model_mod.init_params(model_cfg, fold_rng)
    state = OptimizerState()
    loss_curve: list[float] = []
    log_rows: list[str] = []

    step = 0
    for epoch in range(train_cfg.epochs):
        shuffle_rng = np.random.default_rng([train_cfg.seed, fold_id, epoch])
        order = shuffle_rng.permutation(len(train_records))
        epoch_losses = []
        for idx in order:
            sample = train_records[idx]
            step += 1
            lifted = lift_params(params, requires_grad=True)
            res = forward(
                sample, params, model_cfg, fold_rng, param_nodes=lifted
            )
            surv = survival_nll(res.hazards_node, sample.bin_label, sample.censored)
            dm = decouple_loss(res.features, train_cfg.distance_metric)
            bl = balance_loss(res.traces)
            breakdown, total = total_loss(surv, dm, bl, train_cfg.alpha, train_cfg.beta)
            if not np.isfinite(breakdown.total):
                raise NumericsError(
                    f"non-finite loss at fold {fold_id} epoch {epoch} step {step} "
                    f"(sample {sample.sample_id}): {breakdown}"
                )
            ad.backward(total)
            grads = {path: node.grad for path, node in lifted[1].items()}
            optimizer_step(params, grads, state, train_cfg)
            epoch_losses.append(breakdown.total)
            log_rows.append(
                f"{step},{breakdown.surv:.10g},{breakdown.dm:.10g},"
                f"{breakdown.bl:.10g},{breakdown.total:.10g}"
            )
            log_rows.append(f"rfr,1,{step},{res.draws[0].segment}")
            log_rows.append(f"rfr,2,{step},{res.draws[1].segment}")
        mean_loss = float(np.mean(epoch_losses))
        loss_curve.append(mean_loss)
        log.info("fold %d epoch %d mean total loss %.6f", fold_id, epoch, mean_loss)
        for _, arr in named_params(params):
            if not np.isfinite(arr).all():
                raise NumericsError(f"non-finite parameters after fold {fold_id} epoch {epoch}")

    return FoldResult(
        fold=fold_id, params=params, edges=edges, loss_curve=loss_curve, log_rows=log_rows
    )


def predict_fold(
    records: list[SampleRecord],
    fold_id: int,
    params: HDMoEParams,
    edges: BinEdges,
    model_cfg: ModelConfig,
    rng: np.random.Generator,
    pin_segment: int | None = None,
) -> list[PredictionRow]:
    """Held-out predictions; fusion draws are random unless pinned."""
    _, test_records = split_fold(records, fold_id)
    rows = []
    pins = (pin_segment, pin_segment)
    for sample in test_records:
        res = forward(
            sample, params, model_cfg, rng, pin_segments=pins, requires_grad=False
        )
        rows.append(
            PredictionRow(
                sample_id=sample.sample_id,
                fold=fold_id,
                hazards=res.prediction.hazards,
                risk=res.prediction.risk,
                bin_label=assign_bin(sample.time_months, edges),
                censored=sample.censored,
                time_months=sample.time_months,
            )
        )
    return rows


def predictions_to_csv(rows: list[PredictionRow], num_bins: int) -> str:
    header = (
        ["sample_id", "fold"]
        + [f"h{j}" for j in range(1, num_bins + 1)]
        + ["risk", "bin", "censored", "time_months"]
    )
    lines = [",".join(header)]
    for r in rows:
        fields = (
            [r.sample_id, str(r.fold)]
            + [repr(float(h)) for h in r.hazards]
            + [repr(float(r.risk)), str(r.bin_label), str(r.censored), repr(float(r.time_months))]
        )
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"
