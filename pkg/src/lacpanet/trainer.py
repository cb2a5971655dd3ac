"""Adam training loop with step-decayed learning rate and flip augmentation."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .metrics import MetricsReport, compute_metrics
from .phantom import PhantomCase

logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """A parameter received a NaN or infinite gradient."""


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_step: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    flip_prob: float = 0.5
    batch_size: int = 1
    seed: int = 0
    max_steps: int = 0  # 0 means no cap
    select_best_val: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.lr_decay <= 0 or self.lr_step < 1 or self.eps <= 0:
            raise ValueError("epochs, lr, lr_decay, lr_step and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Initial rate times ``lr_decay`` for every completed block of ``lr_step`` epochs."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside 0..{config.epochs - 1}")
    return config.lr * config.lr_decay ** (epoch // config.lr_step)


def adam_step(params: M.ModelParams, state: AdamState, lr: float, config: TrainConfig) -> None:
    """Bias-corrected Adam update; each parameter tensor is replaced by a new leaf."""
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NonFiniteGradientError(f"parameter {name!r} has {bad} non-finite gradient entries at step {state.t + 1}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in params.names():
        p = params[name]
        g = np.zeros_like(p.data) if p.grad is None else np.asarray(p.grad)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        params[name] = T.Tensor(p.data - update, requires_grad=True)


def flip_arrays(volumes: np.ndarray, mask: np.ndarray, axes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Flip all phases and the mask along the given spatial axes (0, 1, 2)."""
    axes = tuple(int(a) for a in axes)
    if not axes:
        return volumes, mask
    return (np.ascontiguousarray(np.flip(volumes, axis=tuple(a + 1 for a in axes))),
            np.ascontiguousarray(np.flip(mask, axis=axes)))


def augment_flip(case: PhantomCase, rng: np.random.Generator, prob: float = 0.5) -> PhantomCase:
    """Flip each spatial axis independently with probability ``prob``.

    The same flips hit every phase and the mask, so co-registration survives.
    """
    draws = rng.random(3)
    axes = [a for a in range(3) if draws[a] < prob]
    volumes, mask = flip_arrays(case.volumes, case.mask, axes)
    return PhantomCase(case.case_id, case.label, volumes, mask, case.seed)


@dataclass
class TrainResult:
    params: M.ModelParams
    epoch_losses: list[float]
    lr_trace: list[float]
    steps: int
    best_val_auc: float | None = None
    best_val_epoch: int | None = None
    best_params: M.ModelParams | None = None


def train(
    cases: Sequence[PhantomCase],
    model_config: M.ModelConfig,
    train_config: TrainConfig,
    params: M.ModelParams | None = None,
    val_cases: Sequence[PhantomCase] | None = None,
    init_seed: int | None = None,
) -> TrainResult:
    """Optimise the composite loss case by case (batch size 1).

    Case order in epoch ``e`` comes from the stream ``(seed, e, 0)`` and flips
    from ``(seed, e, 1)``, so the run is a pure function of its inputs.
    """
    if not cases:
        raise ValueError("training split is empty")
    if params is None:
        params = M.init_params(model_config, train_config.seed if init_seed is None else init_seed)
    state = AdamState()
    result = TrainResult(params, [], [], 0)
    cap = train_config.max_steps or None
    for epoch in range(train_config.epochs):
        lr = lr_at(epoch, train_config)
        result.lr_trace.append(lr)
        order = np.random.default_rng([train_config.seed, epoch, 0]).permutation(len(cases))
        flip_rng = np.random.default_rng([train_config.seed, epoch, 1])
        losses = []
        for i in order:
            case = augment_flip(cases[i], flip_rng, train_config.flip_prob)
            params.zero_grad()
            loss = M.loss(case.volumes, case.mask, case.label, params, model_config)
            T.backward(loss)
            adam_step(params, state, lr, train_config)
            losses.append(loss.item())
            result.steps += 1
            if cap and result.steps >= cap:
                break
        result.epoch_losses.append(float(np.mean(losses)))
        logger.info("epoch %d lr %.3g loss %.5f", epoch, lr, result.epoch_losses[-1])
        if val_cases and train_config.select_best_val:
            auc = evaluate(params, model_config, val_cases).weighted_auc
            if result.best_val_auc is None or auc > result.best_val_auc:
                result.best_val_auc, result.best_val_epoch = auc, epoch
                result.best_params = M.ModelParams.from_arrays(params.arrays())
        if cap and result.steps >= cap:
            break
    result.params = params
    return result


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get("PHANTOM_THREADS", "1")))
    except ValueError:
        return 1


def predict_cases(params: M.ModelParams, config: M.ModelConfig, cases: Sequence[PhantomCase],
                  workers: int | None = None) -> list[tuple[M.CasePrediction, M.AttentionRecord]]:
    """Forward every case; results come back in input order whatever ``workers`` is."""
    def run(case):
        return M.forward(case.volumes, case.mask, params, config, case.case_id)

    workers = _default_workers() if workers is None else workers
    if workers <= 1 or len(cases) < 2:
        return [run(c) for c in cases]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, cases))


def evaluate(params: M.ModelParams, config: M.ModelConfig, cases: Sequence[PhantomCase],
             workers: int | None = None) -> MetricsReport:
    if not cases:
        raise ValueError("cannot evaluate an empty case list")
    outputs = predict_cases(params, config, cases, workers)
    probs = np.stack([pred.y_final for pred, _ in outputs])
    return compute_metrics([c.label for c in cases], probs, config.n_classes)
