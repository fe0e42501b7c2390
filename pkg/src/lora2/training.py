"""The training loop: combined loss, backward, sensitivity smoothing, scheduled
rank pruning and an AdamW update, one mini-batch at a time."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from .adapters import Lora2Adapter, Lora2Config, effective_rank, init_lora, init_lora2
from .allocation import (
    BudgetSchedule,
    SensitivityState,
    budget_at,
    ema_update,
    global_mask_update,
    importance_full,
    importance_simplified,
    raw_sensitivity,
)
from .autodiff import NonFiniteError, Tape, constant
from .models import ModelSpec, PlantedTask, bind_adapters, model_forward, task_loss
from .orthogonality import OrthConfig, orth_loss

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, msg, record=None):
        super().__init__(msg)
        self.record = record


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class OptimizerState:
    cfg: OptimizerConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def optimizer_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    hold: Mapping[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Bias-corrected adaptive-moment step with decoupled weight decay.

    ``hold`` maps a parameter name to a boolean array of entries that must
    not move; their moments are reset so they restart cleanly if released.
    Returns new parameter arrays; ``state`` is updated in place.
    """
    missing = [n for n in params if n not in grads]
    if missing:
        raise KeyError(f"missing gradients for {missing}")
    c = state.cfg
    state.t += 1
    bc1 = 1.0 - c.beta1**state.t
    bc2 = 1.0 - c.beta2**state.t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        held = None if hold is None else hold.get(name)
        if held is not None:
            g = np.where(held, 0.0, g)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = c.beta1 * m + (1.0 - c.beta1) * g
        v = c.beta2 * v + (1.0 - c.beta2) * g * g
        new = p * (1.0 - c.learning_rate * c.weight_decay)
        new = new - c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        if held is not None:
            new = np.where(held, p, new)
            m = np.where(held, 0.0, m)
            v = np.where(held, 0.0, v)
        state.m[name], state.v[name] = m, v
        out[name] = new
    return out


@dataclass
class AdapterConfig:
    kind: str = "lora2"  # lora2 | lora
    k: int = 8
    r_init: int = 8
    init_std: float = 0.02

    def __post_init__(self):
        if self.kind not in ("lora2", "lora"):
            raise ValueError(f"adapter kind must be 'lora2' or 'lora', got {self.kind!r}")


@dataclass
class AllocatorConfig:
    beta1: float = 0.85
    beta2: float = 0.85
    prune_every: int = 10
    b_target: int | None = None  # total retained ranks; None disables pruning
    t_warmup: int = 0
    t_final: int | None = None
    scoring: str = "simplified"  # simplified | full

    def __post_init__(self):
        if self.scoring not in ("simplified", "full"):
            raise ValueError(f"scoring must be 'simplified' or 'full', got {self.scoring!r}")


@dataclass
class TrainConfig:
    total_steps: int = 500
    batch_size: int = 32
    seed: int = 0
    log_every: int = 10
    eval_every: int = 100
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    orth: OrthConfig = field(default_factory=OrthConfig)
    allocator: AllocatorConfig = field(default_factory=AllocatorConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def schedule(self, b_init: int) -> BudgetSchedule | None:
        a = self.allocator
        if a.b_target is None or self.adapter.kind != "lora2":
            return None
        t_final = self.total_steps if a.t_final is None else a.t_final
        if t_final > self.total_steps:
            raise ValueError(f"t_final={t_final} exceeds total_steps={self.total_steps}")
        return BudgetSchedule(b_init, a.b_target, a.t_warmup, t_final, a.prune_every)


@dataclass
class MetricsRecord:
    step: int
    task_loss: float
    orth_loss: float
    total_rank: int
    threshold: float | None = None
    ranks: dict[str, int] = field(default_factory=dict)
    eval_metric: float | None = None
    budget: int | None = None
    pruned: bool = False
    final: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsRecord":
        return cls(**d)


@dataclass
class TrainResult:
    adapters: dict[str, object]
    metrics: list[MetricsRecord]
    completed: bool
    sensitivity: SensitivityState | None = None
    schedule: BudgetSchedule | None = None

    @property
    def final_ranks(self) -> dict[str, int]:
        return {s: _rank(ad) for s, ad in self.adapters.items()}


def _rank(ad) -> int:
    return effective_rank(ad) if isinstance(ad, Lora2Adapter) else ad.b.shape[1]


def derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def init_adapters(spec: ModelSpec, cfg: AdapterConfig, seed: int) -> dict[str, object]:
    adapters = {}
    for i, name in enumerate(spec.attachment):
        din, dout = spec.site(name).shape
        s = derive_seed(seed, i)
        if cfg.kind == "lora2":
            adapters[name] = init_lora2(Lora2Config(din, dout, cfg.k, cfg.r_init, cfg.init_std, s))
        else:
            adapters[name] = init_lora(din, dout, cfg.r_init, cfg.init_std, s)
    return adapters


def build_loss(spec: ModelSpec, adapters: Mapping[str, object], batch, kind: str, orth: OrthConfig | None, leaves):
    """Task loss plus the orthogonality penalty of every five-factor adapter."""
    pred = model_forward(spec, adapters, constant(batch.x), leaves)
    tl = task_loss(pred, batch, kind)
    ol = None
    if orth is not None and orth.gamma > 0:
        for site, ad in adapters.items():
            if isinstance(ad, Lora2Adapter):
                term = orth_loss(ad, orth.mode, orth.gamma, leaves[site])
                ol = term if ol is None else ol + term
    return tl, ol


def loss_closure(spec: ModelSpec, adapters: Mapping[str, object], batch, kind: str, orth: OrthConfig | None):
    """``(fn, params)`` for finite-difference checks over flat ``<site>.<factor>`` leaves."""
    params = {f"{site}.{f}": v.copy() for site, ad in adapters.items() for f, v in ad.params().items()}

    def fn(leaves):
        grouped = {site: {f: leaves[f"{site}.{f}"] for f in ad.params()} for site, ad in adapters.items()}
        tl, ol = build_loss(spec, adapters, batch, kind, orth, grouped)
        return tl if ol is None else tl + ol

    return fn, params


def evaluate(spec: ModelSpec, adapters: Mapping[str, object], task: PlantedTask) -> float:
    """Held-out mse, or accuracy for classification tasks."""
    pred = model_forward(spec, adapters, task.eval.x)
    if task.kind == "cross-entropy":
        return float(np.mean(np.argmax(pred, axis=1) == task.eval.y))
    return task_loss(pred, task.eval, "mse")


def train(
    cfg: TrainConfig,
    spec: ModelSpec,
    task: PlantedTask,
    adapters: Mapping[str, object] | None = None,
    should_stop: Callable[[], bool] | None = None,
    on_prune: Callable[[int, dict, SensitivityState], None] | None = None,
    on_record: Callable[[MetricsRecord], None] | None = None,
    track_all: bool = False,
) -> TrainResult:
    """Run ``cfg.total_steps`` optimizer steps on ``task``.

    ``on_prune(step, adapters, state)`` is called just before each mask
    update and ``on_record`` receives every metrics record as it is made.
    ``track_all`` keeps statistics for the outer factors too, so full
    importance scores can be computed even under simplified scoring.
    """
    if adapters is None:
        adapters = init_adapters(spec, cfg.adapter, cfg.seed)
    adapters = {s: ad.copy() for s, ad in adapters.items()}
    lora2 = [s for s, ad in adapters.items() if isinstance(ad, Lora2Adapter)]
    b_init = sum(adapters[s].r for s in lora2)
    sched = cfg.schedule(b_init) if lora2 else None
    if sched is not None and sched.b_init > b_init:
        raise ValueError("budget exceeds available singular values")
    full = cfg.allocator.scoring == "full"
    state = None
    if sched is not None:
        state = SensitivityState.for_adapters(
            {s: adapters[s] for s in lora2}, full=full or track_all, beta1=cfg.allocator.beta1, beta2=cfg.allocator.beta2
        )
    opt = OptimizerState(cfg.optimizer)
    orth = cfg.orth if lora2 else None
    rng = np.random.default_rng(cfg.seed)
    n = len(task.train)
    bs = min(cfg.batch_size, n)
    metrics: list[MetricsRecord] = []

    def emit(rec):
        metrics.append(rec)
        if on_record is not None:
            on_record(rec)

    for t in range(1, cfg.total_steps + 1):
        if should_stop is not None and should_stop():
            log.info("stop requested at step %d", t)
            return TrainResult(adapters, metrics, False, state, sched)
        batch = task.train.take(np.sort(rng.choice(n, bs, replace=False)))
        tape = Tape()
        try:
            leaves = bind_adapters(tape, adapters)
            tl, ol = build_loss(spec, adapters, batch, task.kind, orth, leaves)
            loss = tl if ol is None else tl + ol
            if not math.isfinite(loss.item()):
                raise NonFiniteError("loss is not finite")
        except NonFiniteError as exc:
            rec = MetricsRecord(t, float("nan"), float("nan"), _total(adapters), ranks=_ranks(adapters), error=str(exc))
            emit(rec)
            raise TrainingAborted(f"non-finite value at step {t}: {exc}", rec) from exc
        grads = tape.backward(loss)

        threshold = None
        budget = None
        pruned = False
        if state is not None:
            raw = {}
            for key in state.tracked:
                site, _, factor = key.rpartition(".")
                raw[key] = raw_sensitivity(leaves[site][factor].value, grads[key])
            state = ema_update(state, raw)
            if sched.is_prune_step(t):
                if on_prune is not None:
                    on_prune(t, adapters, state)
                score_fn = importance_full if full else importance_simplified
                scores = [score_fn(adapters[s], state, s) for s in lora2]
                budget = budget_at(sched, t)
                upd = global_mask_update([adapters[s] for s in lora2], scores, budget)
                threshold = upd.threshold
                pruned = True

        params, hold = {}, {}
        for site, ad in adapters.items():
            for f, v in ad.params().items():
                params[f"{site}.{f}"] = v
            if isinstance(ad, Lora2Adapter):
                hold[f"{site}.lam"] = ~ad.mask.reshape(1, -1)
        new = optimizer_step(opt, params, grads, hold)
        for site, ad in adapters.items():
            adapters[site] = ad.with_params({f: new[f"{site}.{f}"] for f in ad.params()})

        final = t == cfg.total_steps
        if pruned or final or t % cfg.log_every == 0:
            ev = evaluate(spec, adapters, task) if final or t % cfg.eval_every == 0 else None
            emit(
                MetricsRecord(
                    step=t,
                    task_loss=tl.item(),
                    orth_loss=0.0 if ol is None else ol.item(),
                    total_rank=_total(adapters),
                    threshold=threshold,
                    ranks=_ranks(adapters),
                    eval_metric=ev,
                    budget=budget,
                    pruned=pruned,
                    final=final,
                )
            )
    return TrainResult(adapters, metrics, True, state, sched)


def _ranks(adapters) -> dict[str, int]:
    return {s: _rank(ad) for s, ad in adapters.items()}


def _total(adapters) -> int:
    return sum(_ranks(adapters).values())
