"""Fine-tuning regimes, SGD with momentum, LR schedule, and the train loop.

Regimes decide which parameter groups unfreeze:

* ``full``             -- every backbone tensor plus the task head.
* ``head_only``        -- the task head alone (read from the original
                          class token), the maximal-reuse baseline.
* ``head_cls``         -- head plus a fresh task class token.
* ``memory_full_attn`` -- head + class token + per-layer memory, trained
                          with full attention (destructive to the base).
* ``memory_masked``    -- same trainables under the masked-finetune
                          policy, so base outputs are preserved exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import forward
from .model import ModelConfig, ModelParams, TaskPack, new_task_pack
from .tasks import Dataset, augment

REGIMES = ("full", "head_only", "head_cls", "memory_full_attn", "memory_masked")


@dataclass(frozen=True)
class TrainConfig:
    regime: str
    base_lr: float
    total_steps: int
    batch_size: int
    seed: int
    momentum: float = 0.9
    warmup_steps: int = 5
    grad_clip_norm: float | None = None
    mem_count: int = 0
    init_std: float = 0.02
    eval_fraction: float = 0.05
    eval_interval: int = 100
    flip: bool = True
    crop_pad: int = 2

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.total_steps > 0 and not (0 <= self.warmup_steps < self.total_steps):
            raise ValueError("need warmup_steps < total_steps")
        if self.regime.startswith("memory") and self.mem_count < 1:
            raise ValueError(f"regime {self.regime} requires mem_count >= 1")


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to the base rate, then cosine decay to zero."""
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    if step < cfg.warmup_steps:
        return cfg.base_lr * (step + 1) / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span))


def regime_policy(regime: str) -> str:
    return "masked_finetune" if regime == "memory_masked" else "full"


def pack_for_regime(config: ModelConfig, regime: str, task_name: str,
                    num_classes: int, mem_count: int, seed: int,
                    mem_layers: tuple[int, ...] | None = None,
                    variant: str = "per_layer", dtype=np.float32) -> TaskPack:
    """Build the trainable attachment a regime needs.

    ``mem_layers`` restricts which layers get memory cells (used by the
    placement ablation); the default is every layer.
    """
    if regime in ("full", "head_only"):
        counts = (0,) * config.depth
        return new_task_pack(config, task_name, num_classes, counts, seed,
                             with_cls=False, dtype=dtype)
    if regime == "head_cls":
        counts = (0,) * config.depth
    else:
        layers = range(config.depth) if mem_layers is None else mem_layers
        counts = tuple(mem_count if l in set(layers) else 0 for l in range(config.depth))
    return new_task_pack(config, task_name, num_classes, counts, seed,
                         with_cls=True, variant=variant, dtype=dtype)


def select_trainable(params: ModelParams, pack: TaskPack | None,
                     regime: str) -> dict[str, T.Tensor]:
    """Parameter groups a regime updates, in deterministic order."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    out: dict[str, T.Tensor] = {}
    if regime == "full":
        out.update(params.named_tensors())
    if pack is None:
        if regime != "full":
            raise ValueError(f"regime {regime} needs a task pack to train")
        return out
    named = pack.named_tensors()
    out[f"pack.{pack.task_name}.head_w"] = named["head_w"]
    out[f"pack.{pack.task_name}.head_b"] = named["head_b"]
    if regime in ("head_cls", "memory_full_attn", "memory_masked", "full"):
        if "cls" in named:
            out[f"pack.{pack.task_name}.cls"] = named["cls"]
        elif regime != "full":
            raise ValueError(f"regime {regime} needs a pack with a class token")
    if regime in ("memory_full_attn", "memory_masked", "full"):
        mems = {k: v for k, v in named.items() if k.startswith("mem")}
        if regime != "full" and not mems:
            raise ValueError(f"regime {regime} requires memory cells, pack has none")
        for k, v in mems.items():
            out[f"pack.{pack.task_name}.{k}"] = v
    return out


def sgd_step(groups: dict[str, T.Tensor], velocities: dict[str, np.ndarray],
             lr: float, momentum: float, clip_norm: float | None = None) -> float:
    """One momentum-SGD update with optional global-norm gradient clipping.

    Velocity buffers live in ``velocities`` and persist across steps.
    Returns the pre-clip global gradient norm.
    """
    sq = 0.0
    for name, p in groups.items():
        g = p.grad
        if g is None:
            continue
        gs = float(np.dot(g.ravel(), g.ravel()))
        if not math.isfinite(gs):
            raise RuntimeError(f"non-finite gradient in {name!r}: "
                               f"|g|^2={gs}, shape={p.shape}")
        sq += gs
    total = math.sqrt(sq)
    factor = 1.0
    if clip_norm is not None and total > clip_norm > 0:
        factor = clip_norm / total
    for name, p in groups.items():
        if p.grad is None:
            continue
        dt = p.data.dtype
        g = p.grad * dt.type(factor) if factor != 1.0 else p.grad
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            velocities[name] = v
        v *= dt.type(momentum)
        v += g
        p.data -= dt.type(lr) * v
    return total


@dataclass
class TrainResult:
    records: list[dict] = field(default_factory=list)
    best_holdout: float = 0.0
    best_step: int = 0
    final_holdout: float = 0.0

    def metric_lines(self) -> list[str]:
        return [format_metric_line(**r) for r in self.records]


def format_metric_line(step: int, lr: float, split: str, acc: float) -> str:
    return f"step={step} lr={lr:.6g} split={split} acc={acc:.6f}"


def _batch_stream(n: int, batch_size: int, rng: np.random.Generator):
    """Epoch-shuffled minibatch indices, deterministic under the rng."""
    while True:
        order = rng.permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            yield order[lo:lo + batch_size]


def evaluate(params: ModelParams, packs: list[TaskPack], dataset: Dataset,
             split: str, head_name: str, policy: str = "full",
             batch_size: int = 256) -> float:
    """Top-1 accuracy of one head over a dataset split."""
    images, labels = dataset.split(split)
    if len(labels) == 0:
        raise ValueError(f"split {split!r} is empty")
    correct = 0
    for lo in range(0, len(labels), batch_size):
        batch = images[lo:lo + batch_size]
        trace = forward(params, packs, batch, policy)
        if head_name not in trace.logits:
            raise KeyError(f"no head named {head_name!r}")
        pred = trace.logits[head_name].data.argmax(axis=-1)
        correct += int((pred == labels[lo:lo + batch_size]).sum())
    return correct / len(labels)


def train(params: ModelParams, pack: TaskPack | None, dataset: Dataset,
          cfg: TrainConfig, policy: str | None = None,
          context_packs: list[TaskPack] = ()) -> TrainResult:
    """Fine-tune in place; keeps the best-holdout snapshot of the trainables.

    ``context_packs`` ride along frozen (used when extending a composite).
    Deterministic given the config seed: batch order, augmentation, and
    the update sequence all derive from it.
    """
    policy = regime_policy(cfg.regime) if policy is None else policy
    head_name = pack.task_name if pack is not None else "base"
    packs = list(context_packs) + ([pack] if pack is not None else [])
    result = TrainResult()
    if cfg.total_steps == 0:
        return result

    trainables = select_trainable(params, pack, cfg.regime)
    velocities: dict[str, np.ndarray] = {}
    batch_rng = np.random.default_rng([cfg.seed, 0x5BA7C4])
    aug_rng = np.random.default_rng([cfg.seed, 0xA06E47])
    train_images, train_labels = dataset.split("train")
    batches = _batch_stream(len(train_labels), min(cfg.batch_size, len(train_labels)),
                            batch_rng)

    best = {k: v.data.copy() for k, v in trainables.items()}
    result.best_holdout = -1.0
    acc_sum, acc_n = 0.0, 0

    for step in range(cfg.total_steps):
        idx = next(batches)
        images = augment(train_images[idx], cfg.flip, cfg.crop_pad, aug_rng)
        labels = train_labels[idx]
        lr = lr_at(cfg, step)
        for p in trainables.values():
            p.zero_grad()
        with T.Tape() as tape:
            trace = forward(params, packs, images, policy)
            loss = T.cross_entropy_logits(trace.logits[head_name], labels)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"non-finite loss at step {step}")
        T.backward(tape, loss)
        sgd_step(trainables, velocities, lr, cfg.momentum, cfg.grad_clip_norm)

        pred = trace.logits[head_name].data.argmax(axis=-1)
        acc_sum += float((pred == labels).mean())
        acc_n += 1

        last = step == cfg.total_steps - 1
        if (step + 1) % cfg.eval_interval == 0 or last:
            result.records.append(dict(step=step + 1, lr=lr, split="train",
                                       acc=acc_sum / max(acc_n, 1)))
            acc_sum, acc_n = 0.0, 0
            holdout = evaluate(params, packs, dataset, "holdout", head_name, policy)
            result.records.append(dict(step=step + 1, lr=lr, split="holdout",
                                       acc=holdout))
            if holdout > result.best_holdout:
                result.best_holdout = holdout
                result.best_step = step + 1
                best = {k: v.data.copy() for k, v in trainables.items()}
            result.final_holdout = holdout

    for k, v in trainables.items():
        v.data[...] = best[k]
    if pack is not None:
        pack.trained_policy = policy
    return result
