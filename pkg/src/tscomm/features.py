"""Packing of per-intersection observations into flat row batches.

The networks operate on a stack of movement rows from several intersections
(possibly of different sizes).  Everything that couples rows of the same
intersection is expressed as a constant sparse block-diagonal matrix: slot
accumulation, per-phase group means, per-item pooling and the phase/item maps
for dueling aggregation.  Attention stays within each item via row offsets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

from .env import AgentSpec, Observation
from .tensor import group_mask


@dataclass
class MovementBatch:
    n_items: int
    counts: np.ndarray  # (N,)
    permission: np.ndarray  # (N,) current-phase permission bit
    turns: np.ndarray  # (N,) int
    received: np.ndarray  # (N,)
    row_offsets: np.ndarray  # (B+1,)
    slot_incidence: sparse.csr_matrix  # (S, N)
    slot_offsets: np.ndarray  # (B+1,)
    phase_perm: sparse.csr_matrix  # (P, N) 0/1
    group1_mean: sparse.csr_matrix  # (P, N)
    group2_mean: sparse.csr_matrix  # (P, N)
    is_current: np.ndarray  # (P,)
    phase_offsets: np.ndarray  # (B+1,)
    phase_item: np.ndarray  # (P,) owning item
    row_mean: sparse.csr_matrix  # (B, N)
    phase_expand: sparse.csr_matrix  # (P, B) phase row -> owning item
    phase_average: sparse.csr_matrix  # (B, P) mean over an item's phases
    current_phase: np.ndarray  # (B,) phase index per item
    phase_counts: np.ndarray  # (B,)

    @property
    def attn_mask(self) -> np.ndarray:
        """Dense (N, N) mask of rows allowed to attend to each other."""
        return group_mask(self.row_offsets)

    @property
    def n_rows(self) -> int:
        return len(self.counts)

    @property
    def n_phase_rows(self) -> int:
        return len(self.is_current)

    def split_phases(self, values: np.ndarray) -> list[np.ndarray]:
        o = self.phase_offsets
        return [values[o[k]:o[k + 1]] for k in range(self.n_items)]

    def split_slots(self, values: np.ndarray) -> list[np.ndarray]:
        o = self.slot_offsets
        return [values[o[k]:o[k + 1]] for k in range(self.n_items)]

    def split_rows(self, values: np.ndarray) -> list[np.ndarray]:
        o = self.row_offsets
        return [values[o[k]:o[k + 1]] for k in range(self.n_items)]


def _offsets(sizes) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def _csr_parts(block: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m = sparse.csr_matrix(block)
    return m.indptr.astype(np.int64), m.indices.astype(np.int64), m.data


def _agent_parts(agent: AgentSpec) -> dict:
    """Per-agent sparse blocks, computed once per spec object."""
    hit = _PARTS.get(id(agent))
    if hit is not None and hit[0] is agent:
        return hit[1]
    perm = agent.permissions
    c1 = perm.sum(axis=1, keepdims=True)
    c2 = agent.n_movements - c1
    g1 = perm / np.maximum(c1, 1)
    # an empty stopped group contributes the zero vector
    g2 = np.where(c2 > 0, (1.0 - perm) / np.maximum(c2, 1), 0.0)
    m = agent.n_movements
    parts = {
        "slot_incidence": _csr_parts(agent.slot_incidence.reshape(len(agent.slots), m)),
        "phase_perm": _csr_parts(perm),
        "group1_mean": _csr_parts(g1),
        "group2_mean": _csr_parts(g2),
        "row_mean": _csr_parts(np.full((1, m), 1.0 / m)),
    }
    _PARTS[id(agent)] = (agent, parts)
    return parts


_PARTS: dict[int, tuple[AgentSpec, dict]] = {}


def _block_diag(parts: Sequence[tuple], col_sizes: Sequence[int]) -> sparse.csr_matrix:
    n_cols = int(sum(col_sizes))
    if not parts:
        return sparse.csr_matrix((0, n_cols))
    indptr, indices, data = [np.zeros(1, dtype=np.int64)], [], []
    nnz = c0 = 0
    for (ptr, idx, val), w in zip(parts, col_sizes):
        indptr.append(ptr[1:] + nnz)
        indices.append(idx + c0)
        data.append(val)
        nnz += len(val)
        c0 += w
    indptr = np.concatenate(indptr)
    return sparse.csr_matrix(
        (np.concatenate(data), np.concatenate(indices), indptr), shape=(len(indptr) - 1, n_cols)
    )


def make_batch(
    agents: Sequence[AgentSpec],
    counts: Sequence[np.ndarray],
    phases: Sequence[int],
    received: Sequence[np.ndarray] | None = None,
) -> MovementBatch:
    """Pack ``agents[k]`` observed with ``counts[k]`` under phase ``phases[k]``."""
    B = len(agents)
    m_sizes = [a.n_movements for a in agents]
    p_sizes = [a.n_phases for a in agents]
    s_sizes = [len(a.slots) for a in agents]
    row_off = _offsets(m_sizes)
    N = int(row_off[-1])
    P = int(sum(p_sizes))
    parts = [_agent_parts(a) for a in agents]

    def diag(key: str) -> sparse.csr_matrix:
        return _block_diag([p[key] for p in parts], m_sizes)

    phase_item = np.repeat(np.arange(B), p_sizes).astype(np.int64)
    expand = sparse.csr_matrix((np.ones(P), phase_item, np.arange(P + 1)), shape=(P, B))
    average = sparse.csr_matrix(
        (1.0 / np.repeat(np.maximum(p_sizes, 1), p_sizes), np.arange(P), _offsets(p_sizes)),
        shape=(B, P),
    )
    phase_off = _offsets(p_sizes)
    is_current = np.zeros(P)
    current = np.array([int(p) for p in phases], dtype=np.int64)
    is_current[phase_off[:-1] + current] = 1.0
    return MovementBatch(
        n_items=B,
        counts=np.concatenate([np.asarray(c, dtype=float) for c in counts]) if B else np.zeros(0),
        permission=np.concatenate([a.permissions[int(p)] for a, p in zip(agents, phases)]) if B else np.zeros(0),
        turns=np.concatenate([a.turns for a in agents]) if B else np.zeros(0, dtype=np.int64),
        received=(
            np.concatenate([np.asarray(r, dtype=float) for r in received])
            if received is not None and B else np.zeros(N)
        ),
        row_offsets=row_off,
        slot_incidence=diag("slot_incidence"),
        slot_offsets=_offsets(s_sizes),
        phase_perm=diag("phase_perm"),
        group1_mean=diag("group1_mean"),
        group2_mean=diag("group2_mean"),
        is_current=is_current,
        phase_offsets=phase_off,
        phase_item=phase_item,
        row_mean=diag("row_mean"),
        phase_expand=expand,
        phase_average=average,
        current_phase=current,
        phase_counts=np.array(p_sizes, dtype=np.int64),
    )


def batch_from_observations(
    agents: Sequence[AgentSpec], observations: Sequence[Observation]
) -> MovementBatch:
    specs = [agents[o.agent] for o in observations]
    return make_batch(
        specs,
        [o.movement_counts for o in observations],
        [o.phase_index for o in observations],
        [o.received_predictions for o in observations],
    )
