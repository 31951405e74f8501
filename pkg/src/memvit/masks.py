"""Token roles, attention-mask construction, and the reuse verifier.

Masks are boolean query-by-key matrices over a token layout. Queries are
the carried tokens only; memory tokens appear as key columns and never as
query rows, which encodes "memory does not attend" structurally. The four
policies:

* ``full``          -- every carried token sees every key.
* ``masked_finetune`` -- single-task training mask: the original class
  token and input patches see only each other, so their outputs stay
  those of the frozen backbone.
* ``concatenation`` -- multi-task composition with fully isolated tasks.
* ``extension``     -- like concatenation, but a later task's tokens may
  additionally attend to all earlier tasks' tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POLICIES = ("full", "masked_finetune", "extension", "concatenation")
MASKED_POLICIES = ("masked_finetune", "extension", "concatenation")

INP = "inp"
CLS0 = "cls0"
TASK_CLS = "task_cls"
TASK_MEM = "task_mem"
BASE_MEM = "base_mem"


@dataclass(frozen=True)
class TokenRole:
    """What one token is: kind, owning task (0 = backbone), layer, slot."""

    kind: str
    task: int = 0
    layer: int = -1
    slot: int = -1


@dataclass(frozen=True)
class TokenLayout:
    """Carried-token order plus per-layer memory key extensions.

    Carried order is fixed: CLS0, then N input patches, then one class
    token per task in ascending task index. Memory keys are grouped by
    owner (backbone first, then tasks ascending) within each layer.
    """

    n_patches: int
    depth: int
    base_mem_counts: tuple[int, ...] = ()
    task_names: tuple[str, ...] = ()
    task_mem_counts: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        base = tuple(self.base_mem_counts) or (0,) * self.depth
        object.__setattr__(self, "base_mem_counts", base)
        object.__setattr__(self, "task_mem_counts",
                           tuple(tuple(m) for m in self.task_mem_counts))
        if len(self.base_mem_counts) != self.depth:
            raise ValueError("base_mem_counts length must equal depth")
        if len(self.task_names) != len(self.task_mem_counts):
            raise ValueError("one mem-count list per task required")
        for m in self.task_mem_counts:
            if len(m) != self.depth:
                raise ValueError("task mem counts must cover every layer")
        if len(set(self.task_names)) != len(self.task_names):
            raise ValueError(f"duplicate task names: {list(self.task_names)}")

    @property
    def num_tasks(self) -> int:
        return len(self.task_names)

    @property
    def carried_count(self) -> int:
        return 1 + self.n_patches + self.num_tasks

    def carried_roles(self) -> list[TokenRole]:
        roles = [TokenRole(CLS0)]
        roles += [TokenRole(INP, slot=i) for i in range(self.n_patches)]
        roles += [TokenRole(TASK_CLS, task=j) for j in range(1, self.num_tasks + 1)]
        return roles

    def memory_roles(self, layer: int) -> list[TokenRole]:
        if not 0 <= layer < self.depth:
            raise ValueError(f"layer {layer} outside depth {self.depth}")
        roles = [TokenRole(BASE_MEM, layer=layer, slot=s)
                 for s in range(self.base_mem_counts[layer])]
        for j, counts in enumerate(self.task_mem_counts, start=1):
            roles += [TokenRole(TASK_MEM, task=j, layer=layer, slot=s)
                      for s in range(counts[layer])]
        return roles

    def key_roles(self, layer: int) -> list[TokenRole]:
        return self.carried_roles() + self.memory_roles(layer)

    def key_count(self, layer: int) -> int:
        return self.carried_count + len(self.memory_roles(layer))

    def task_index(self, name: str) -> int:
        return self.task_names.index(name) + 1


@dataclass(frozen=True)
class AttentionMask:
    """Boolean [carried, carried + memory] visibility matrix for one layer."""

    matrix: np.ndarray
    policy: str
    layer: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=bool)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2:
            raise ValueError("mask must be a 2-D query-by-key matrix")
        if not m.any(axis=1).all():
            raise ValueError("every query row must allow at least one key")


def _allows(q: TokenRole, k: TokenRole, policy: str) -> bool:
    if policy == "full":
        return True
    if q.kind in (INP, CLS0):
        return k.kind in (INP, CLS0, BASE_MEM)
    if q.kind == TASK_CLS:
        if k.kind in (INP, CLS0, BASE_MEM):
            return True
        if k.task == q.task:
            return True
        return policy == "extension" and 1 <= k.task < q.task
    raise ValueError(f"token kind {q.kind!r} cannot be a query")


def build_mask(layout: TokenLayout, policy: str, layer: int) -> AttentionMask:
    """Construct the visibility matrix for one layer under a policy."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    queries = layout.carried_roles()
    keys = layout.key_roles(layer)
    m = np.empty((len(queries), len(keys)), dtype=bool)
    for qi, q in enumerate(queries):
        for ki, k in enumerate(keys):
            m[qi, ki] = _allows(q, k, policy)
    return AttentionMask(m, policy, layer)


def mask_table(layout: TokenLayout, policy: str) -> str:
    """Human-readable query-by-key visibility table (one row per role group).

    Cells: ``y`` allowed, ``-`` denied, ``*`` allowed only under the
    extension policy. Memory rows are omitted; memory never queries.
    """
    k = layout.num_tasks
    col_groups = ["INP", "CLS"] + [f"C{j}" for j in range(1, k + 1)] + \
                 [f"M{j}" for j in range(1, k + 1)]
    row_groups = ["INP", "CLS"] + [f"C{j}" for j in range(1, k + 1)]

    def task_of(group: str) -> int:
        return int(group[1:]) if group[0] in "CM" and group[1:].isdigit() else 0

    def cell(qg: str, kg: str) -> str:
        if policy == "full":
            return "y"
        q_task = task_of(qg)
        k_task = task_of(kg)
        if qg in ("INP", "CLS"):
            return "y" if kg in ("INP", "CLS") else "-"
        if kg in ("INP", "CLS") or k_task == q_task:
            return "y"
        if 1 <= k_task < q_task:
            return "*" if policy == "extension" else "-"
        return "-"

    width = max(len(g) for g in col_groups + row_groups) + 2
    lines = [f"attention mask, policy={policy} (y allow / - deny / * extension-only)"]
    lines.append("Q\\K".ljust(width) + "".join(g.center(width) for g in col_groups))
    for qg in row_groups:
        lines.append(qg.ljust(width) + "".join(cell(qg, kg).center(width) for kg in col_groups))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Reuse verification: symbolic dependency closure over the mask graph
# ---------------------------------------------------------------------------


@dataclass
class ReuseReport:
    """Which token groups (and so parameter groups) each read-out can depend on."""

    policy: str
    depth: int
    closures: dict[str, set[str]] = field(default_factory=dict)
    param_groups: dict[str, set[str]] = field(default_factory=dict)

    def render(self) -> str:
        lines = [f"dependency closure after {self.depth} layers, policy={self.policy}"]
        for token in sorted(self.closures):
            groups = ", ".join(sorted(self.closures[token]))
            params = ", ".join(sorted(self.param_groups[token]))
            lines.append(f"  {token:<12} tokens: {{{groups}}}")
            lines.append(f"  {'':<12} params: {{{params}}}")
        return "\n".join(lines)


def verify_reuse(layout: TokenLayout, policy: str, depth: int | None = None) -> ReuseReport:
    """Transitive dependency closure of each carried token over the mask graph.

    Proves the preservation guarantees symbolically: under any masked
    policy the original class token's output cannot depend on task tokens,
    and task ``j`` cannot depend on tasks added after it. Raises if either
    proof fails, which would mean the mask rules are broken.
    """
    if policy == "full":
        raise ValueError("verify_reuse requires a masked policy; full attention reuses nothing")
    if policy not in MASKED_POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    depth = layout.depth if depth is None else depth

    carried = ["cls0", "inp"] + [f"task_cls:{j}" for j in range(1, layout.num_tasks + 1)]
    has_base_mem = any(layout.base_mem_counts)
    mem_of = {j: f"task_mem:{j}" for j in range(1, layout.num_tasks + 1)
              if any(layout.task_mem_counts[j - 1])}

    def allowed_keys(group: str) -> list[str]:
        keys: list[str]
        if group in ("cls0", "inp"):
            keys = ["cls0", "inp"] + (["base_mem"] if has_base_mem else [])
        else:
            j = int(group.split(":")[1])
            keys = ["cls0", "inp"] + (["base_mem"] if has_base_mem else [])
            owns = [j] + (list(range(1, j)) if policy == "extension" else [])
            for i in sorted(owns):
                keys.append(f"task_cls:{i}")
                if i in mem_of:
                    keys.append(mem_of[i])
        return keys

    reach: dict[str, set[str]] = {g: {g} for g in carried}
    for _ in range(depth):
        new = {}
        for g in carried:
            acc = set(reach[g])
            for k in allowed_keys(g):
                acc |= reach.get(k, {k})
            new[g] = acc
        reach = new

    report = ReuseReport(policy=policy, depth=depth)
    for g in carried:
        report.closures[g] = reach[g]
        params = {"backbone"}
        for dep in reach[g]:
            if dep.startswith("task_"):
                params.add(f"task:{dep.split(':')[1]}")
        if g.startswith("task_cls:"):
            params.add(f"head:task:{g.split(':')[1]}")
        elif g == "cls0":
            params.add("head:base")
        report.param_groups[g] = params

    # The two guarantees the masked policies exist for.
    bad = {d for d in report.closures["cls0"] if d.startswith("task_")}
    if bad:
        raise AssertionError(f"cls0 closure leaked into tasks: {sorted(bad)}")
    for j in range(1, layout.num_tasks + 1):
        later = {d for d in report.closures[f"task_cls:{j}"]
                 if d.startswith("task_") and int(d.split(":")[1]) > j}
        if later:
            raise AssertionError(f"task {j} closure leaked into later tasks: {sorted(later)}")
        if policy == "concatenation":
            other = {d for d in report.closures[f"task_cls:{j}"]
                     if d.startswith("task_") and int(d.split(":")[1]) != j}
            if other:
                raise AssertionError(
                    f"task {j} closure leaked across concatenated tasks: {sorted(other)}")
    return report
