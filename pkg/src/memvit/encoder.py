"""The memory-augmented transformer encoder.

Pre-norm ViT blocks with two memory mechanisms:

* ``per_layer`` (the main design): each layer receives extra learnable
  rows as attention keys/values only. Memory is normalized by the layer's
  shared first norm, never issues queries, gets no residual or MLP, and is
  never carried forward, so the carried token count is invariant.
* ``propagated_*`` (ablation baselines): memory enters at layer 0 as
  ordinary carried tokens. ``propagated_added`` additionally adds a fresh
  learnable vector per slot before every later layer.

Attention is computed per query group, where a group is a maximal run of
carried tokens sharing a mask row. Each group gathers its allowed keys
into a compact array before any reduction, which makes mask exclusion
structural: computations of tokens that cannot see one another are
performed on separate arrays, so adding new tasks to a layout cannot
perturb old outputs even at the bit level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .masks import (BASE_MEM, CLS0, INP, TASK_CLS, TASK_MEM, TokenLayout,
                    TokenRole, build_mask)
from .model import LayerParams, ModelConfig, ModelParams, TaskPack

SLOT = "slot"  # carried memory slot of a propagated variant


@dataclass
class ForwardTrace:
    """Everything one forward pass exposes: logits, attention, token roles."""

    logits: dict[str, T.Tensor]
    readout_index: dict[str, int]
    query_roles: list[TokenRole]
    key_roles: list[list[TokenRole]]
    attn: list[np.ndarray] | None = None
    layer_outputs: list[np.ndarray] | None = None
    final_tokens: T.Tensor | None = None


def patch_images(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Split images into flattened patches, row-major over the patch grid."""
    b, h, w, c = images.shape
    if h != config.image_size or w != config.image_size or c != config.channels:
        raise ValueError(
            f"images {images.shape[1:]} do not match configured "
            f"{config.image_size}x{config.image_size}x{config.channels}")
    p = config.patch_size
    g = config.grid
    x = images.reshape(b, g, p, g, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)  # (b, gy, gx, py, px, c)
    return np.ascontiguousarray(x.reshape(b, g * g, p * p * c))


def patch_embed(images: np.ndarray, params: ModelParams) -> T.Tensor:
    """Project patches, prepend the class token, add position embeddings."""
    cfg = params.config
    patches = patch_images(np.asarray(images), cfg).astype(params.dtype)
    tokens = T.add_bias(T.matmul(T.Tensor(patches), params.patch_w), params.patch_b)
    b = patches.shape[0]
    cls = T.tile_leading(params.cls, b)  # (B, 1, D)
    tokens = T.concat_tokens(cls, tokens)
    return T.add(tokens, T.tile_leading(params.pos, b))


def _row_groups(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of consecutive identical mask rows."""
    groups = []
    lo = 0
    for i in range(1, mask.shape[0]):
        if not np.array_equal(mask[i], mask[lo]):
            groups.append((lo, i))
            lo = i
    groups.append((lo, mask.shape[0]))
    return groups


def encoder_layer(carried: T.Tensor, lp: LayerParams, num_heads: int,
                  mask: np.ndarray, extra_tokens: Sequence[T.Tensor] = (),
                  want_weights: bool = False) -> tuple[T.Tensor, np.ndarray | None]:
    """One pre-norm block over carried tokens with optional memory keys.

    ``carried`` is [B, T, D]; ``extra_tokens`` are unbatched [m_i, D] rows
    appended, in order, to the key space of this layer only. ``mask`` must
    be [T, T + sum(m_i)] boolean; queries exist for carried tokens only.
    Output keeps exactly the carried tokens (memory is key/value-only).
    """
    b, t, d = carried.shape
    extras = [e for e in extra_tokens if e is not None and e.shape[0] > 0]
    s = sum(e.shape[0] for e in extras)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (t, t + s):
        raise ValueError(f"mask shape {mask.shape} does not match ({t}, {t + s}) "
                         f"for {t} carried tokens and {s} memory rows")
    if not mask.any(axis=1).all():
        raise ValueError("every carried token must be allowed at least one key")
    hd = d // num_heads
    groups = _row_groups(mask)

    # Per carried group: shared-norm, fused qkv projection, head split.
    sizes = [hi - lo for lo, hi in groups]
    parts = T.split_tokens(carried, sizes) if len(groups) > 1 else (carried,)
    proj = []
    for part in parts:
        normed = T.layernorm(part, lp.ln1_g, lp.ln1_b)
        qkv = T.add_bias(T.matmul(normed, lp.w_qkv), lp.b_qkv)
        q, k, v = T.split_last(qkv, [d, d, d])
        proj.append((part, T.split_heads(q, num_heads),
                     T.split_heads(k, num_heads), T.split_heads(v, num_heads)))

    # Memory rows share the layer norm, contribute keys/values only.
    key_segments: list[tuple[int, int, T.Tensor, T.Tensor]] = []
    col = 0
    for (lo, hi), (_, _, kh, vh) in zip(groups, proj):
        key_segments.append((lo, hi, kh, vh))
        col = hi
    for e in extras:
        normed = T.layernorm(e, lp.ln1_g, lp.ln1_b)
        qkv = T.add_bias(T.matmul(normed, lp.w_qkv), lp.b_qkv)
        _, k, v = T.split_last(qkv, [d, d, d])
        kh = T.tile_leading(T.split_heads(k, num_heads), b)
        vh = T.tile_leading(T.split_heads(v, num_heads), b)
        key_segments.append((col, col + e.shape[0], kh, vh))
        col += e.shape[0]

    inv_scale = 1.0 / math.sqrt(hd)
    outputs = []
    weights_full = (np.zeros((b, num_heads, t, t + s), dtype=carried.data.dtype)
                    if want_weights else None)
    for (lo, hi), (part, qh, _, _) in zip(groups, proj):
        allowed = mask[lo]
        pieces_k, pieces_v, col_idx = [], [], []
        for seg_lo, seg_hi, kh, vh in key_segments:
            seg_allow = allowed[seg_lo:seg_hi]
            if seg_allow.all():
                pieces_k.append(kh)
                pieces_v.append(vh)
                col_idx.append(np.arange(seg_lo, seg_hi))
            elif seg_allow.any():
                idx = np.flatnonzero(seg_allow)
                pieces_k.append(T.gather_tokens(kh, idx))
                pieces_v.append(T.gather_tokens(vh, idx))
                col_idx.append(idx + seg_lo)
        keys = T.concat_tokens(*pieces_k)
        values = T.concat_tokens(*pieces_v)
        scores = T.scale(T.matmul(qh, T.transpose_last2(keys)), inv_scale)
        attn = T.softmax_masked(scores, None)
        ctx = T.merge_heads(T.matmul(attn, values))
        attn_out = T.add_bias(T.matmul(ctx, lp.w_out), lp.b_out)
        u = T.add(part, attn_out)
        normed2 = T.layernorm(u, lp.ln2_g, lp.ln2_b)
        hidden = T.gelu(T.add_bias(T.matmul(normed2, lp.w_mlp1), lp.b_mlp1))
        mlp_out = T.add_bias(T.matmul(hidden, lp.w_mlp2), lp.b_mlp2)
        outputs.append(T.add(u, mlp_out))
        if want_weights:
            cols = np.concatenate(col_idx)
            weights_full[:, :, lo:hi, cols] = attn.data
    return T.concat_tokens(*outputs), weights_full


def derive_layout(config: ModelConfig, packs: Sequence[TaskPack]) -> TokenLayout:
    """Token layout for a backbone plus attached packs (per_layer memory only).

    Propagated-variant slots are carried tokens, not key extensions, so
    they are handled by ``forward`` directly and never appear here.
    """
    base_mem = config.mem_counts if config.variant == "per_layer" else (0,) * config.depth
    with_tokens = [p for p in packs if p.cls_token is not None]
    return TokenLayout(
        n_patches=config.n_patches,
        depth=config.depth,
        base_mem_counts=tuple(base_mem),
        task_names=tuple(p.task_name for p in with_tokens),
        task_mem_counts=tuple(
            p.mem_counts() if p.variant == "per_layer" else (0,) * config.depth
            for p in with_tokens),
    )


def _validate_variants(config: ModelConfig, packs: Sequence[TaskPack], policy: str) -> None:
    propagated_packs = [p for p in packs if p.variant != "per_layer"]
    backbone_propagated = config.variant != "per_layer" and any(config.mem_counts)
    if backbone_propagated and packs:
        raise ValueError("a propagated-memory backbone cannot take task packs")
    if propagated_packs:
        if len(packs) != 1 or policy != "full":
            raise ValueError("propagated-variant packs support single-task "
                             "full-attention forwards only")
        if propagated_packs[0].cls_token is None:
            raise ValueError("propagated-variant packs need a class token to carry slots")


def forward(params: ModelParams, packs: Sequence[TaskPack], images: np.ndarray,
            policy: str = "full", layout: TokenLayout | None = None,
            want_trace: bool = False) -> ForwardTrace:
    """Run the encoder and apply every head to its read-out token.

    Base heads read the original class token; each pack's head reads that
    pack's class token (or the original one for head-only packs). Masks
    come from the layout and policy, one per layer.
    """
    cfg = params.config
    _validate_variants(cfg, packs, policy)
    if layout is None:
        layout = derive_layout(cfg, packs)

    head_names = set(params.heads)
    for p in packs:
        if p.task_name in head_names:
            raise ValueError(f"duplicate head name {p.task_name!r}")
        head_names.add(p.task_name)

    carried = patch_embed(images, params)
    b = carried.shape[0]
    query_roles: list[TokenRole] = [TokenRole(CLS0)] + \
        [TokenRole(INP, slot=i) for i in range(cfg.n_patches)]

    # Carried memory slots for propagated variants (backbone or single pack).
    backbone_slots = 0
    if cfg.variant != "per_layer" and cfg.mem_counts[0] > 0:
        backbone_slots = cfg.mem_counts[0]
        carried = T.concat_tokens(carried, T.tile_leading(params.layers[0].mem, b))
        query_roles += [TokenRole(SLOT, slot=i) for i in range(backbone_slots)]

    readout_index: dict[str, int] = {name: 0 for name in params.heads}
    pack_slots = 0
    task_j = 0  # layout task index counts packs that add tokens
    for p in packs:
        if p.cls_token is None:
            readout_index[p.task_name] = 0
            continue
        task_j += 1
        readout_index[p.task_name] = carried.shape[-2]
        carried = T.concat_tokens(carried, T.tile_leading(p.cls_token, b))
        query_roles.append(TokenRole(TASK_CLS, task=task_j))
        if p.variant != "per_layer" and p.memory[0] is not None:
            pack_slots = p.memory[0].shape[0]
            carried = T.concat_tokens(carried, T.tile_leading(p.memory[0], b))
            query_roles += [TokenRole(SLOT, task=task_j, slot=i) for i in range(pack_slots)]

    propagated = backbone_slots > 0 or pack_slots > 0
    n_slots = backbone_slots or pack_slots

    attn_trace: list[np.ndarray] | None = [] if want_trace else None
    layer_trace: list[np.ndarray] | None = [] if want_trace else None
    key_roles: list[list[TokenRole]] = []

    for l in range(cfg.depth):
        if propagated:
            slot_variant = cfg.variant if backbone_slots else packs[0].variant
            if l > 0 and slot_variant == "propagated_added":
                add_vec = params.layers[l].mem if backbone_slots else packs[0].memory[l]
                if add_vec is not None:
                    t_now = carried.shape[-2]
                    front, slots = T.split_tokens(carried, [t_now - n_slots, n_slots])
                    slots = T.add(slots, T.tile_leading(add_vec, b))
                    carried = T.concat_tokens(front, slots)
            t_now = carried.shape[-2]
            mask = np.ones((t_now, t_now), dtype=bool)
            extras: list[T.Tensor] = []
            key_roles.append(list(query_roles))
        else:
            mask_obj = build_mask(layout, policy, l)
            mask = mask_obj.matrix
            extras = []
            if layout.base_mem_counts[l] > 0:
                extras.append(params.layers[l].mem)
            for p in packs:
                if p.variant == "per_layer" and p.memory[l] is not None:
                    extras.append(p.memory[l])
            key_roles.append(layout.key_roles(l))

        carried, weights = encoder_layer(carried, params.layers[l], cfg.heads,
                                         mask, extras, want_weights=want_trace)
        if want_trace:
            attn_trace.append(weights)
            layer_trace.append(carried.data.copy())

    logits: dict[str, T.Tensor] = {}
    for name in sorted(readout_index):
        idx = readout_index[name]
        tok = T.gather_tokens(carried, [idx])
        normed = T.layernorm(tok, params.ln_f_g, params.ln_f_b)
        flat = T.drop_token_axis(normed)
        if name in params.heads:
            w, bias = params.heads[name]
        else:
            pack = next(p for p in packs if p.task_name == name)
            w, bias = pack.head_w, pack.head_b
        logits[name] = T.add_bias(T.matmul(flat, w), bias)

    return ForwardTrace(logits=logits, readout_index=readout_index,
                        query_roles=query_roles, key_roles=key_roles,
                        attn=attn_trace, layer_outputs=layer_trace,
                        final_tokens=carried)


def forward_tokens(params: ModelParams, tokens: T.Tensor,
                   readout: int = 0, head: str = "base") -> T.Tensor:
    """Plain full-attention encoder over an explicit token sequence.

    Bypasses patching, memory, and layouts: every token attends to every
    token at every layer. This is the reference path used to check that
    propagated memory equals ordinary extra input tokens.
    """
    carried = tokens
    t = carried.shape[-2]
    mask = np.ones((t, t), dtype=bool)
    for lp in params.layers:
        carried, _ = encoder_layer(carried, lp, params.config.heads, mask, ())
    tok = T.gather_tokens(carried, [readout])
    normed = T.layernorm(tok, params.ln_f_g, params.ln_f_b)
    w, bias = params.heads[head]
    return T.add_bias(T.matmul(T.drop_token_axis(normed), w), bias)
