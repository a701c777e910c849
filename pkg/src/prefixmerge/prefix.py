"""Trainable prefix matrix: shared/unique row layouts, Fisher-driven row
selection masks, target-task merging, and checkpointing.

Row r of the matrix stores the key/value blocks for prefix position r at
every layer and attention site; a task sees only the rows listed in its
index map. Manual designs lay rows out as [shared | task0 unique | task1
unique | ...]; self-adaptive designs start fully shared and later keep the
top-scoring rows per task, masking the rest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .binio import CheckpointError, read_blob, take_array, write_blob
from .model import SITES, PrefixActivations

INIT_STD = 0.02


class DesignError(ValueError):
    """Inconsistent prefix design parameters."""


class MaskViolationError(LookupError):
    """A gather requested a row that the active mask has disabled."""


@dataclass(frozen=True)
class ManualDesign:
    """Fixed layout: `shared_len` rows used by every task plus
    `unique_len` rows owned by each of `n_tasks` tasks."""
    shared_len: int
    unique_len: int
    n_tasks: int

    def __post_init__(self):
        if self.n_tasks < 1:
            raise DesignError(f"need at least one task, got {self.n_tasks}")
        if self.shared_len < 0 or self.unique_len < 0:
            raise DesignError("sub-prefix lengths cannot be negative")
        if self.shared_len + self.unique_len == 0:
            raise DesignError("prefix length per task is zero")

    @classmethod
    def from_totals(cls, unique_total: int, shared_total: int, n_tasks: int):
        """Build from the Unq(total)+Sha(total) labelling; the unique total
        is split evenly across tasks."""
        if n_tasks >= 1 and unique_total % n_tasks:
            raise DesignError(f"unique total {unique_total} does not split "
                              f"evenly across {n_tasks} tasks")
        return cls(shared_len=shared_total,
                   unique_len=unique_total // n_tasks, n_tasks=n_tasks)

    @property
    def total_rows(self) -> int:
        return self.shared_len + self.unique_len * self.n_tasks

    @property
    def per_task_len(self) -> int:
        return self.shared_len + self.unique_len


@dataclass(frozen=True)
class SelfAdaptiveDesign:
    """Start from `init_len` fully shared rows; after scoring, keep the
    `top_n` most important rows per task."""
    init_len: int
    top_n: int
    n_tasks: int

    def __post_init__(self):
        if self.n_tasks < 1:
            raise DesignError(f"need at least one task, got {self.n_tasks}")
        if not (1 <= self.top_n <= self.init_len):
            raise DesignError(f"top_n {self.top_n} must be in [1, init_len="
                              f"{self.init_len}]")

    @property
    def total_rows(self) -> int:
        return self.init_len


def indices_for_task(design: ManualDesign, task_id: int):
    """Shared rows first, then the task's contiguous unique block."""
    if not isinstance(design, ManualDesign):
        raise DesignError("index layout is defined by manual designs only")
    if not (0 <= task_id < design.n_tasks):
        raise IndexError(f"task_id {task_id} out of range "
                         f"for {design.n_tasks} tasks")
    shared = list(range(design.shared_len))
    start = design.shared_len + task_id * design.unique_len
    return shared + list(range(start, start + design.unique_len))


class PrefixMatrix:
    """The trainable rows plus per-task index maps and the active mask."""

    def __init__(self, design, n_layers: int, d_model: int, seed: int = 0,
                 rows: np.ndarray = None):
        self.design = design
        self.n_layers = n_layers
        self.d_model = d_model
        self.row_dim = n_layers * len(SITES) * 2 * d_model
        total = design.total_rows
        if rows is None:
            rng = np.random.default_rng(seed)
            rows = rng.normal(scale=INIT_STD, size=(total, self.row_dim))
        elif rows.shape != (total, self.row_dim):
            raise DesignError(f"rows shape {rows.shape} does not match design "
                              f"({total} x {self.row_dim})")
        self.rows = ad.Tensor(rows, requires_grad=True)
        self.active_mask = np.ones(total, dtype=bool)
        if isinstance(design, ManualDesign):
            self.task_index_maps = [indices_for_task(design, t)
                                    for t in range(design.n_tasks)]
        else:
            self.task_index_maps = [list(range(total))
                                    for _ in range(design.n_tasks)]

    @property
    def total_rows(self) -> int:
        return self.design.total_rows

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.rows.data, dtype="<f8").tobytes())
        return h.hexdigest()


def gather(prefix: PrefixMatrix, indices) -> PrefixActivations:
    """Slice the listed rows into per-site, per-layer key/value blocks.

    The blocks are graph views of the row matrix, so backward lands only on
    the gathered rows. Requesting an inactive row is an error.
    """
    idx = list(indices)
    if len(idx) == 0:
        return PrefixActivations(length=0, blocks={})
    arr = np.asarray(idx, dtype=np.intp)
    if arr.min() < 0 or arr.max() >= prefix.total_rows:
        raise IndexError(f"prefix row index out of range "
                         f"(total {prefix.total_rows})")
    inactive = arr[~prefix.active_mask[arr]]
    if inactive.size:
        raise MaskViolationError(f"rows {sorted(set(inactive.tolist()))} are "
                                 f"masked out")
    sel = ad.take_rows(prefix.rows, arr)
    d = prefix.d_model
    blocks = {}
    for s_i, site in enumerate(SITES):
        per_layer = []
        for layer in range(prefix.n_layers):
            base = ((layer * len(SITES) + s_i) * 2) * d
            key = ad.slice_cols(sel, base, base + d)
            val = ad.slice_cols(sel, base + d, base + 2 * d)
            per_layer.append((key, val))
        blocks[site] = per_layer
    return PrefixActivations(length=len(idx), blocks=blocks)


def apply_selection(prefix: PrefixMatrix, reports, top_n: int):
    """Keep each task's `top_n` best-scoring rows and mask the rest.

    Rows are ranked by descending score, ties broken by lower row index;
    a row used by no task becomes inactive. Returns (task_index_maps,
    active_mask), which are also written back onto the prefix.
    """
    design = prefix.design
    if not isinstance(design, SelfAdaptiveDesign):
        raise DesignError("row selection applies to self-adaptive designs only")
    if top_n > design.init_len:
        raise DesignError(f"top_n {top_n} exceeds init_len {design.init_len}")
    if len(reports) != design.n_tasks:
        raise DesignError(f"expected {design.n_tasks} reports, "
                          f"got {len(reports)}")
    maps = []
    for report in reports:
        scores = np.asarray(report.scores, dtype=np.float64)
        if scores.shape != (prefix.total_rows,):
            raise DesignError(f"report for task {report.task_id} has "
                              f"{scores.shape} scores, expected "
                              f"{prefix.total_rows}")
        order = sorted(range(scores.size), key=lambda i: (-scores[i], i))
        maps.append(order[:top_n])
    mask = np.zeros(prefix.total_rows, dtype=bool)
    for m in maps:
        mask[m] = True
    prefix.task_index_maps = maps
    prefix.active_mask = mask
    return maps, mask


def merge_for_target(prefix: PrefixMatrix):
    """Index list the target task trains on: every row for manual designs,
    the ascending union of task maps for self-adaptive ones."""
    if isinstance(prefix.design, ManualDesign):
        return list(range(prefix.total_rows))
    used = sorted(set().union(*map(set, prefix.task_index_maps)))
    return list(used)


def realized_regions(prefix: PrefixMatrix):
    """Label each active row 'shared' or 'unique:<task>' by map membership."""
    labels = {}
    for row in range(prefix.total_rows):
        owners = [t for t, m in enumerate(prefix.task_index_maps) if row in m]
        if not owners:
            continue
        labels[row] = "shared" if len(owners) > 1 else f"unique:{owners[0]}"
    return labels


def save_prefix(prefix: PrefixMatrix, path) -> None:
    design = prefix.design
    if isinstance(design, ManualDesign):
        dspec = {"kind": "manual", "shared_len": design.shared_len,
                 "unique_len": design.unique_len, "n_tasks": design.n_tasks}
    else:
        dspec = {"kind": "self_adaptive", "init_len": design.init_len,
                 "top_n": design.top_n, "n_tasks": design.n_tasks}
    header = {
        "kind": "prefix",
        "design": dspec,
        "task_index_maps": [list(map(int, m)) for m in prefix.task_index_maps],
        "active_mask": [bool(b) for b in prefix.active_mask],
        "dims": {"n_layers": prefix.n_layers, "d_model": prefix.d_model,
                 "total_rows": prefix.total_rows, "row_dim": prefix.row_dim},
    }
    write_blob(path, header, [prefix.rows.data])


def load_prefix(path) -> PrefixMatrix:
    header, payload = read_blob(path)
    if header.get("kind") != "prefix":
        raise CheckpointError(f"{path}: not a prefix checkpoint")
    dspec = header["design"]
    if dspec["kind"] == "manual":
        design = ManualDesign(dspec["shared_len"], dspec["unique_len"],
                              dspec["n_tasks"])
    elif dspec["kind"] == "self_adaptive":
        design = SelfAdaptiveDesign(dspec["init_len"], dspec["top_n"],
                                    dspec["n_tasks"])
    else:
        raise CheckpointError(f"{path}: unknown design kind {dspec['kind']!r}")
    dims = header["dims"]
    rows = take_array(payload, 0, (dims["total_rows"], dims["row_dim"]))
    prefix = PrefixMatrix(design, dims["n_layers"], dims["d_model"], rows=rows)
    prefix.task_index_maps = [list(map(int, m))
                              for m in header["task_index_maps"]]
    prefix.active_mask = np.asarray(header["active_mask"], dtype=bool)
    if prefix.active_mask.shape != (prefix.total_rows,):
        raise CheckpointError(f"{path}: active mask length mismatch")
    return prefix
