"""Extract task packs and assemble multi-task composite models.

Concatenation places independently fine-tuned packs side by side with
masks that isolate every task; extension additionally lets each new task
attend to everything that was there before it. Either way the backbone's
own outputs, and under concatenation each task's standalone outputs, are
reproduced exactly: the grouped attention evaluates each token set on the
same arrays it would see alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import derive_layout, forward
from .masks import TokenLayout
from .model import ModelParams, TaskPack, fingerprint
from .tasks import Dataset
from .trainer import TrainConfig, TrainResult, train

COMPOSITE_POLICIES = ("concatenation", "extension")


@dataclass
class CompositeModel:
    backbone: ModelParams
    packs: list[TaskPack] = field(default_factory=list)
    policy: str = "concatenation"

    def __post_init__(self):
        if self.policy not in COMPOSITE_POLICIES:
            raise ValueError(f"composite policy must be one of {COMPOSITE_POLICIES}, "
                             f"got {self.policy!r}")

    @property
    def layout(self) -> TokenLayout:
        return derive_layout(self.backbone.config, self.packs)

    @property
    def preserving(self) -> bool:
        """True when every pack was trained under the masked policy."""
        return all(p.trained_policy == "masked_finetune" for p in self.packs)

    def head_names(self) -> list[str]:
        return sorted(self.backbone.heads) + [p.task_name for p in self.packs]

    def logits(self, images: np.ndarray, policy: str | None = None):
        """Per-head logits arrays; ``policy`` overrides for naive evaluation."""
        trace = forward(self.backbone, self.packs, images,
                        self.policy if policy is None else policy)
        return {k: v.data for k, v in trace.logits.items()}


def extract_pack(backbone: ModelParams, packs: list[TaskPack], task_name: str) -> TaskPack:
    """Deep-copy one task's trainables and stamp the backbone identity."""
    for p in packs:
        if p.task_name == task_name:
            if p.cls_token is None:
                raise ValueError(
                    f"pack {task_name!r} has no task class token; head-only "
                    "fine-tunes are not composable")
            out = p.copy()
            out.base_fingerprint = fingerprint(backbone)
            return out
    raise KeyError(f"no task named {task_name!r}; have {[p.task_name for p in packs]}")


def concat(backbone: ModelParams, packs: list[TaskPack],
           policy: str = "concatenation") -> CompositeModel:
    """Assemble packs onto a frozen backbone.

    Every pack must carry the backbone's fingerprint. Packs trained with
    full attention are accepted (that is how interference is measured) but
    the composite reports itself non-preserving.
    """
    base_fp = fingerprint(backbone)
    seen = set()
    for p in packs:
        if p.task_name in seen or p.task_name in backbone.heads:
            raise ValueError(f"duplicate task name {p.task_name!r}")
        seen.add(p.task_name)
        if p.variant != "per_layer":
            raise ValueError(f"pack {p.task_name!r} uses variant {p.variant!r}; "
                             "only per_layer packs compose")
        if p.base_fingerprint != base_fp:
            raise ValueError(
                f"pack {p.task_name!r} was extracted from a different backbone "
                f"(fingerprint {p.base_fingerprint[:12]}... != {base_fp[:12]}...)")
    return CompositeModel(backbone=backbone, packs=[p.copy() for p in packs],
                          policy=policy)


def extend(composite: CompositeModel, pack: TaskPack, dataset: Dataset,
           cfg: TrainConfig) -> tuple[CompositeModel, TrainResult]:
    """Train a new pack on top of an extension composite.

    The new task's tokens may attend to all existing tokens; existing
    tokens cannot see the new ones, so every prior head's outputs are
    unchanged. Returns a new composite; the input one is not mutated.
    """
    if composite.policy != "extension":
        raise ValueError(f"cannot extend a {composite.policy!r} composite; "
                         "build it with the extension policy")
    if pack.cls_token is None:
        raise ValueError("extension packs need a task class token")
    new_pack = pack.copy()
    result = train(composite.backbone, new_pack, dataset, cfg,
                   policy="extension", context_packs=list(composite.packs))
    new_pack.trained_policy = "extension"
    new_pack.base_fingerprint = fingerprint(composite.backbone)
    return CompositeModel(backbone=composite.backbone,
                          packs=[p.copy() for p in composite.packs] + [new_pack],
                          policy="extension"), result


def preservation_report(composite: CompositeModel, images: np.ndarray) -> dict[str, float]:
    """Max absolute logit deviation, per head, versus the standalone models.

    The base head is compared against the bare backbone; each task head
    against a single-pack model under the pack's training policy. All
    deviations are exactly zero for masked-trained packs.
    """
    combined = composite.logits(images)
    report: dict[str, float] = {}
    bare = forward(composite.backbone, [], images, "full").logits
    for name in composite.backbone.heads:
        report[name] = float(np.abs(combined[name] - bare[name].data).max())
    for j, p in enumerate(composite.packs):
        if p.trained_policy == "extension":
            # reference = the composite state this pack was trained in
            ref = forward(composite.backbone, composite.packs[:j + 1], images,
                          "extension").logits[p.task_name]
        else:
            policy = "masked_finetune" if p.trained_policy == "masked_finetune" else "full"
            ref = forward(composite.backbone, [p], images, policy).logits[p.task_name]
        report[p.task_name] = float(np.abs(combined[p.task_name] - ref.data).max())
    return report
