"""Model configuration, parameter containers, and initialization.

A backbone owns the patch projection, position embedding, original class
token, encoder layers (optionally with their own per-layer memory), the
final norm, and named heads read from the original class token. Task
packs are the portable fine-tuning artifacts: one task's class token,
per-layer memory, and head, attachable to a frozen backbone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import Tensor, tensor

VARIANTS = ("per_layer", "propagated_first", "propagated_added")

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    channels: int
    patch_size: int
    depth: int
    width: int
    heads: int
    num_classes: int
    mlp_ratio: int = 4
    mem_counts: tuple[int, ...] = ()
    variant: str = "per_layer"

    def __post_init__(self):
        mem = tuple(self.mem_counts) or (0,) * self.depth
        object.__setattr__(self, "mem_counts", mem)
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"patch size {self.patch_size} must divide image size {self.image_size}")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if len(self.mem_counts) != self.depth:
            raise ValueError("mem_counts must have one entry per layer")
        if any(m < 0 for m in self.mem_counts):
            raise ValueError("memory counts must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "propagated_first" and any(self.mem_counts[1:]):
            raise ValueError("propagated_first carries layer-0 memory only; "
                             "later layers must have zero cells")
        if self.variant == "propagated_added":
            m0 = self.mem_counts[0]
            if any(m != m0 for m in self.mem_counts):
                raise ValueError("propagated_added needs equal cell counts at every layer")
        if min(self.image_size, self.channels, self.depth, self.width,
               self.heads, self.num_classes, self.mlp_ratio) < 1:
            raise ValueError("all structural dimensions must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.width


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    w_qkv: Tensor
    b_qkv: Tensor
    w_out: Tensor
    b_out: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_mlp1: Tensor
    b_mlp1: Tensor
    w_mlp2: Tensor
    b_mlp2: Tensor
    mem: Tensor | None = None


@dataclass
class ModelParams:
    config: ModelConfig
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    cls: Tensor
    layers: list[LayerParams]
    ln_f_g: Tensor
    ln_f_b: Tensor
    heads: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)

    def named_tensors(self) -> dict[str, Tensor]:
        """All tensors in the canonical (serialization) order."""
        out: dict[str, Tensor] = {
            "patch_w": self.patch_w, "patch_b": self.patch_b,
            "pos": self.pos, "cls": self.cls,
        }
        for i, lp in enumerate(self.layers):
            for f in ("ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_out", "b_out",
                      "ln2_g", "ln2_b", "w_mlp1", "b_mlp1", "w_mlp2", "b_mlp2"):
                out[f"layer{i:02d}.{f}"] = getattr(lp, f)
            if lp.mem is not None:
                out[f"layer{i:02d}.mem"] = lp.mem
        out["ln_f_g"] = self.ln_f_g
        out["ln_f_b"] = self.ln_f_b
        for name in sorted(self.heads):
            w, b = self.heads[name]
            out[f"head.{name}.w"] = w
            out[f"head.{name}.b"] = b
        return out

    @property
    def dtype(self) -> np.dtype:
        return self.patch_w.data.dtype

    def copy(self) -> "ModelParams":
        return _copy_params(self)

    def astype(self, dtype) -> "ModelParams":
        return _copy_params(self, dtype=dtype)


@dataclass
class TaskPack:
    """Portable fine-tuning artifact: class token + per-layer memory + head."""

    task_name: str
    cls_token: Tensor | None
    memory: list[Tensor | None]
    head_w: Tensor
    head_b: Tensor
    trained_policy: str = "untrained"
    base_fingerprint: str = ""
    variant: str = "per_layer"

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.cls_token is not None:
            out["cls"] = self.cls_token
        for i, m in enumerate(self.memory):
            if m is not None:
                out[f"mem{i:02d}"] = m
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def mem_counts(self) -> tuple[int, ...]:
        return tuple(0 if m is None else m.shape[0] for m in self.memory)

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[1]

    def copy(self) -> "TaskPack":
        return _copy_pack(self)

    def astype(self, dtype) -> "TaskPack":
        return _copy_pack(self, dtype=dtype)


def _clone(t: Tensor | None, dtype=None) -> Tensor | None:
    if t is None:
        return None
    data = t.data.copy() if dtype is None else t.data.astype(dtype)
    return Tensor(data, requires_grad=t.requires_grad, name=t.name,
                  _alloc_grad=t.requires_grad)


def _copy_params(p: ModelParams, dtype=None) -> ModelParams:
    layers = [LayerParams(**{f: _clone(getattr(lp, f), dtype) for f in
                             ("ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_out", "b_out",
                              "ln2_g", "ln2_b", "w_mlp1", "b_mlp1", "w_mlp2", "b_mlp2",
                              "mem")})
              for lp in p.layers]
    return ModelParams(
        config=p.config,
        patch_w=_clone(p.patch_w, dtype), patch_b=_clone(p.patch_b, dtype),
        pos=_clone(p.pos, dtype), cls=_clone(p.cls, dtype),
        layers=layers,
        ln_f_g=_clone(p.ln_f_g, dtype), ln_f_b=_clone(p.ln_f_b, dtype),
        heads={k: (_clone(w, dtype), _clone(b, dtype)) for k, (w, b) in p.heads.items()},
    )


def _copy_pack(p: TaskPack, dtype=None) -> TaskPack:
    return TaskPack(
        task_name=p.task_name,
        cls_token=_clone(p.cls_token, dtype),
        memory=[_clone(m, dtype) for m in p.memory],
        head_w=_clone(p.head_w, dtype), head_b=_clone(p.head_b, dtype),
        trained_policy=p.trained_policy,
        base_fingerprint=p.base_fingerprint,
        variant=p.variant,
    )


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Initialize a backbone; embeddings and weights drawn N(0, 0.02^2).

    Biases start at zero and norm scales at one. The draw order is fixed,
    so the same seed always yields bit-identical parameters, and layers
    with zero memory cells consume no draws.
    """
    rng = np.random.default_rng(seed)

    def normal(*shape, grad=True):
        return tensor(rng.normal(0.0, INIT_STD, shape), requires_grad=grad, dtype=dtype)

    def zeros(*shape):
        return tensor(np.zeros(shape), requires_grad=True, dtype=dtype)

    def ones(*shape):
        return tensor(np.ones(shape), requires_grad=True, dtype=dtype)

    d = config.width
    params = ModelParams(
        config=config,
        patch_w=normal(config.patch_dim, d),
        patch_b=zeros(d),
        pos=normal(config.n_patches + 1, d),
        cls=normal(1, d),
        layers=[],
        ln_f_g=ones(d),
        ln_f_b=zeros(d),
    )
    for m in config.mem_counts:
        params.layers.append(LayerParams(
            ln1_g=ones(d), ln1_b=zeros(d),
            w_qkv=normal(d, 3 * d), b_qkv=zeros(3 * d),
            w_out=normal(d, d), b_out=zeros(d),
            ln2_g=ones(d), ln2_b=zeros(d),
            w_mlp1=normal(d, config.hidden), b_mlp1=zeros(config.hidden),
            w_mlp2=normal(config.hidden, d), b_mlp2=zeros(d),
            mem=normal(m, d) if m > 0 else None,
        ))
    params.heads["base"] = (normal(d, config.num_classes), zeros(config.num_classes))
    return params


def new_task_pack(config: ModelConfig, task_name: str, num_classes: int,
                  mem_counts, seed: int, *, with_cls: bool = True,
                  variant: str = "per_layer", dtype=np.float32) -> TaskPack:
    """Fresh trainable pack for one task; same init convention as the backbone."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    mem_counts = tuple(mem_counts) or (0,) * config.depth
    if len(mem_counts) != config.depth:
        raise ValueError("pack mem_counts must cover every layer")
    if variant == "propagated_first" and any(mem_counts[1:]):
        raise ValueError("propagated_first packs carry layer-0 memory only")
    if variant == "propagated_added" and any(m != mem_counts[0] for m in mem_counts):
        raise ValueError("propagated_added packs need equal cell counts at every layer")
    if not with_cls and any(mem_counts):
        raise ValueError("memory cells need a class token to be attended from")
    rng = np.random.default_rng(seed)
    d = config.width

    def normal(*shape):
        return tensor(rng.normal(0.0, INIT_STD, shape), requires_grad=True, dtype=dtype)

    cls_token = normal(1, d) if with_cls else None
    memory = [normal(m, d) if m > 0 else None for m in mem_counts]
    head_w = normal(d, num_classes)
    head_b = tensor(np.zeros(num_classes), requires_grad=True, dtype=dtype)
    return TaskPack(task_name=task_name, cls_token=cls_token, memory=memory,
                    head_w=head_w, head_b=head_b, variant=variant)


def with_mem_counts(config: ModelConfig, mem_counts, variant: str | None = None) -> ModelConfig:
    return replace(config, mem_counts=tuple(mem_counts),
                   variant=variant if variant is not None else config.variant)


def fingerprint(params: ModelParams) -> str:
    """SHA-256 over the backbone tensor bytes in canonical order (32-bit LE).

    This is the identity a task pack records at extraction time; composing
    a pack onto a different backbone must fail loudly, since preservation
    guarantees are meaningless across backbones.
    """
    import hashlib

    h = hashlib.sha256()
    for t in params.named_tensors().values():
        h.update(np.ascontiguousarray(t.data.astype("<f4")).tobytes())
    return h.hexdigest()
