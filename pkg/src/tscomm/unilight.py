"""Per-phase Q-values from grouped movement embeddings.

Every movement row (count, current permission bit, received arrival
prediction, learned turn embedding) is embedded by one shared ReLU layer.  For
each candidate phase the embeddings split into the permitted group and the
stopped group; their means, weighted 5 and 1, are concatenated with a phase
indicator and mapped to an advantage.  A value stream on the mean of all
embeddings completes the dueling decomposition::

    Q(a) = V + A(a) - mean_a A(a)

The parameters do not depend on the number of movements or phases, so one
store serves every intersection.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import InvalidTopology
from .features import MovementBatch
from .tensor import ParamStore, Tensor

PREFIX = "light"
HIDDEN = 32
TURN_DIM = 2
W_PERMITTED = 5.0
W_STOPPED = 1.0
PHASE_ENCODINGS = ("bit", "onehot")


def phase_code_dims(encoding: str, max_phases: int) -> tuple[int, int]:
    """Width of the phase code fed to the advantage and value heads."""
    if encoding == "bit":
        return 1, 0
    if encoding == "onehot":
        return max_phases, max_phases
    raise ValueError(f"unknown phase encoding {encoding!r}")


def init_params(
    store: ParamStore,
    rng: np.random.Generator,
    hidden: int = HIDDEN,
    turn_dim: int = TURN_DIM,
    phase_encoding: str = "bit",
    max_phases: int = 8,
) -> None:
    adv_code, val_code = phase_code_dims(phase_encoding, max_phases)
    store.add(f"{PREFIX}.turn", rng.normal(0.0, 1.0, size=(3, turn_dim)))
    store.init_dense(f"{PREFIX}.embed", 3 + turn_dim, hidden, rng)
    store.init_dense(f"{PREFIX}.adv", 2 * hidden + adv_code, 1, rng)
    store.init_dense(f"{PREFIX}.value", hidden + val_code, 1, rng)


def embed(store: ParamStore, batch: MovementBatch) -> Tensor:
    turn_vec = T.take(store[f"{PREFIX}.turn"], batch.turns)
    x = T.concat([np.column_stack([batch.counts, batch.permission, batch.received]), turn_vec], axis=1)
    return T.relu(T.dense(x, store[f"{PREFIX}.embed.W"], store[f"{PREFIX}.embed.b"]))


def _onehot_current(batch: MovementBatch, max_phases: int) -> np.ndarray:
    if batch.n_items and int(batch.phase_counts.max()) > max_phases:
        raise ValueError(f"intersection with more than {max_phases} phases")
    out = np.zeros((batch.n_items, max_phases))
    out[np.arange(batch.n_items), batch.current_phase] = 1.0
    return out


def advantages(
    store: ParamStore,
    H: Tensor,
    batch: MovementBatch,
    phase_encoding: str = "bit",
    max_phases: int = 8,
) -> Tensor:
    g1 = T.scale(T.const_matmul(batch.group1_mean, H), W_PERMITTED)
    g2 = T.scale(T.const_matmul(batch.group2_mean, H), W_STOPPED)
    if phase_encoding == "bit":
        code = batch.is_current.reshape(-1, 1)
    else:
        code = _onehot_current(batch, max_phases)[batch.phase_item]
    x = T.concat([g1, g2, code], axis=1)
    a = T.dense(x, store[f"{PREFIX}.adv.W"], store[f"{PREFIX}.adv.b"])
    return T.reshape(a, (batch.n_phase_rows,))


def value(store: ParamStore, H: Tensor, batch: MovementBatch, phase_encoding: str = "bit", max_phases: int = 8) -> Tensor:
    pooled = T.const_matmul(batch.row_mean, H)
    if phase_encoding == "onehot":
        pooled = T.concat([pooled, _onehot_current(batch, max_phases)], axis=1)
    v = T.dense(pooled, store[f"{PREFIX}.value.W"], store[f"{PREFIX}.value.b"])
    return T.reshape(v, (batch.n_items,))


def q_values(store: ParamStore, batch: MovementBatch, phase_encoding: str = "bit", max_phases: int = 8) -> Tensor:
    """Flat Q-values, one per (item, phase) row; see ``batch.split_phases``."""
    if batch.n_phase_rows and batch.phase_perm.getnnz(axis=1).min() == 0:
        raise InvalidTopology("a phase permits no movement, its permitted group would be empty")
    H = embed(store, batch)
    adv = advantages(store, H, batch, phase_encoding, max_phases)
    v = value(store, H, batch, phase_encoding, max_phases)
    adv_col = T.reshape(adv, (-1, 1))
    adv_mean = T.const_matmul(batch.phase_expand, T.const_matmul(batch.phase_average, adv_col))
    v_rows = T.const_matmul(batch.phase_expand, T.reshape(v, (-1, 1)))
    return T.reshape(v_rows + adv_col - adv_mean, (batch.n_phase_rows,))

def greedy(q: np.ndarray) -> int:
    """Argmax with the lowest index winning ties."""
    return int(np.argmax(q))


def select_action(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon {epsilon} outside [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(len(q)))
    return greedy(q)
