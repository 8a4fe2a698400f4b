"""Scheduled execution: the propagation units as rectangular batched ops.

Semantics must match the naive recursion exactly (up to float summation
order): padded slots are zero-filled on gather, their attention scores are
pushed to an underflow fill before softmax, and their outputs are never
scattered back, so padding cannot influence any real node's state. A debug
rng can overwrite padding with noise to let tests verify that claim.
"""

from __future__ import annotations

import numpy as np

from .model import (
    ModelConfig,
    NodeStates,
    bottom_up_step,
    embed_rows,
    top_down_step,
)
from .numerics import (
    MASK_FILL,
    ParamStore,
    Tensor,
    add,
    concat,
    constant,
    gather_rows,
    mul,
    reshape,
    scatter_rows,
)
from .scheduler import Schedule, build_schedule
from .trees import SyntaxTree


def _np_dtype(params: ParamStore):
    return np.float64 if params.dtype == "float64" else np.float32


def batch_state_tensors(
    trees: list[SyntaxTree],
    params: ParamStore,
    config: ModelConfig,
    schedule: Schedule | None = None,
    pad_rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, Tensor, Schedule]:
    """Embed and propagate a batch; returns (X, S_up, S_down, schedule).

    Row layout follows ``schedule.row_index``. ``pad_rng``, when given, fills
    padded slots with random values instead of zeros (leak testing only).
    """
    if schedule is None:
        schedule = build_schedule(trees)
    dtype = _np_dtype(params)
    d = config.d

    type_ids = np.empty(schedule.n_rows, dtype=np.intp)
    token_plus1 = np.empty(schedule.n_rows, dtype=np.intp)
    for t, tree in enumerate(trees):
        index = schedule.row_index[t]
        for nid, node in tree.nodes.items():
            row = index[nid]
            type_ids[row] = node.type_id
            token_plus1[row] = 0 if node.token_id is None else node.token_id + 1
    X = embed_rows(params, config, type_ids, token_plus1)

    def padded_children(state: Tensor, bucket) -> Tensor:
        B, w = bucket.child_rows.shape
        H = reshape(gather_rows(state, bucket.child_rows.reshape(-1)), (B, w, d))
        mask3 = bucket.mask[:, :, None].astype(dtype)
        H = mul(H, constant(mask3))
        if pad_rng is not None:
            noise = pad_rng.standard_normal((B, w, d)).astype(dtype)
            H = add(H, constant(noise * (1.0 - mask3)))
        return H

    S = X
    for group in schedule.bottom_up_levels:
        parent_rows = []
        outs = []
        for bucket in group.buckets:
            B, w = bucket.child_rows.shape
            Hc = padded_children(S, bucket)
            e_par = reshape(gather_rows(X, bucket.parents), (B, 1, d))
            mask_add = ((1.0 - bucket.mask) * MASK_FILL).astype(dtype)[:, None, None, :]
            h = bottom_up_step(
                e_par,
                Hc,
                params,
                config,
                mask_add=mask_add,
                child_counts=bucket.child_counts,
            )
            outs.append(reshape(h, (B, d)))
            parent_rows.append(bucket.parents)
        S = scatter_rows(S, np.concatenate(parent_rows), concat(outs, axis=0))

    if not config.use_top_down:
        return X, S, S, schedule

    D = S  # root rows stay as-is: the root's final state is its bottom-up state
    for group in schedule.top_down_levels:
        child_rows = []
        rows = []
        for bucket in group.buckets:
            B, w = bucket.child_rows.shape
            Hup = padded_children(S, bucket)
            h_par = reshape(gather_rows(D, bucket.parents), (B, 1, d))
            out = reshape(top_down_step(h_par, Hup, params, config), (B * w, d))
            real = np.flatnonzero(bucket.mask.reshape(-1))
            rows.append(gather_rows(out, real))
            child_rows.append(bucket.child_rows.reshape(-1)[real])
        D = scatter_rows(D, np.concatenate(child_rows), concat(rows, axis=0))
    return X, S, D, schedule


def encode_batch(
    trees: list[SyntaxTree],
    params: ParamStore,
    config: ModelConfig,
    schedule: Schedule | None = None,
    pad_rng: np.random.Generator | None = None,
) -> list[NodeStates]:
    """Per-tree NodeStates via the level-synchronous schedule."""
    _, S, D, schedule = batch_state_tensors(trees, params, config, schedule, pad_rng)
    out = []
    for t, tree in enumerate(trees):
        index = schedule.row_index[t]
        out.append(
            NodeStates(
                {nid: S.data[row].copy() for nid, row in index.items()},
                {nid: D.data[row].copy() for nid, row in index.items()},
            )
        )
    return out


def padded_tree_rows(schedule: Schedule) -> tuple[np.ndarray, np.ndarray]:
    """Per-tree global row indices padded to the widest tree, plus a mask."""
    widths = [len(index) for index in schedule.row_index]
    width = max(widths)
    idx = np.zeros((len(widths), width), dtype=np.intp)
    mask = np.zeros((len(widths), width), dtype=np.float64)
    for t, index in enumerate(schedule.row_index):
        rows = [index[nid] for nid in sorted(index)]
        idx[t, : len(rows)] = rows
        mask[t, : len(rows)] = 1.0
    return idx, mask
