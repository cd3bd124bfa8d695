"""Neighbor communication: predict next-phase permissions and outgoing arrivals.

For one intersection the model embeds every movement (count, current
permission bit, learned turn embedding), predicts which movements the next
phase will permit with one-head self-attention, and accumulates permission
weighted embeddings onto the outgoing slots they feed.  A shared linear head
turns each slot embedding into a per-lane arrival estimate, which is what the
downstream neighbor receives.

Two arrival paths exist on purpose: inference weights embeddings with the
predicted permissions, training weights them with the permissions of the
phase actually executed and recorded in the replay buffer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .features import MovementBatch
from .tensor import ParamStore, Tensor

PREFIX = "comm"
HIDDEN = 32
TURN_DIM = 2


def init_params(store: ParamStore, rng: np.random.Generator, hidden: int = HIDDEN, turn_dim: int = TURN_DIM) -> None:
    store.add(f"{PREFIX}.turn", rng.normal(0.0, 1.0, size=(3, turn_dim)))
    store.init_dense(f"{PREFIX}.embed", 2 + turn_dim, hidden, rng)
    bound = 1.0 / np.sqrt(hidden)
    for name in ("Wq", "Wk", "Wv"):
        store.add(f"{PREFIX}.attn.{name}", rng.uniform(-bound, bound, size=(hidden, hidden)))
    store.init_dense(f"{PREFIX}.attn.out", hidden, 1, rng)
    store.init_dense(f"{PREFIX}.arrivals", hidden, 1, rng)


@dataclass
class UniCommOutput:
    arrivals: Tensor  # (S,) per outgoing slot
    permissions: Tensor  # (N,) predicted next-phase permission probabilities
    phase_loss: Tensor | None = None
    volume_loss: Tensor | None = None


def embed_movements(store: ParamStore, counts, permission, turns) -> Tensor:
    """One 32-dim ReLU embedding per movement row, weights shared by all rows."""
    turn_vec = T.take(store[f"{PREFIX}.turn"], turns)
    x = T.concat([np.column_stack([counts, permission]), turn_vec], axis=1)
    return T.relu(T.dense(x, store[f"{PREFIX}.embed.W"], store[f"{PREFIX}.embed.b"]))


def predict_permissions(
    store: ParamStore, H: Tensor, mask: np.ndarray | None = None, groups: np.ndarray | None = None
) -> Tensor:
    scores = T.self_attention_1head(
        H,
        store[f"{PREFIX}.attn.Wq"],
        store[f"{PREFIX}.attn.Wk"],
        store[f"{PREFIX}.attn.Wv"],
        store[f"{PREFIX}.attn.out.W"],
        store[f"{PREFIX}.attn.out.b"],
        mask,
        groups,
    )
    return T.sigmoid(scores)


def accumulate_slots(H: Tensor, g, slot_incidence) -> Tensor:
    """Sum of ``g_j * ratio_sj * H_j`` over the movements feeding each slot."""
    g = T.as_tensor(g)
    weighted = T.mul(T.reshape(g, (H.shape[0], 1)), H)
    return T.const_matmul(slot_incidence, weighted)


def predict_arrivals(store: ParamStore, H: Tensor, g, slot_incidence) -> Tensor:
    acc = accumulate_slots(H, g, slot_incidence)
    out = T.dense(acc, store[f"{PREFIX}.arrivals.W"], store[f"{PREFIX}.arrivals.b"])
    return T.reshape(out, (acc.shape[0],))


def losses(gp: Tensor, gr: np.ndarray, l_from_gr: Tensor, lr: np.ndarray) -> tuple[Tensor, Tensor]:
    """Phase loss (BCE against recorded permissions) and volume loss (MSE)."""
    return T.bce(gp, gr), T.mse(l_from_gr, lr)


def forward(
    store: ParamStore,
    batch: MovementBatch,
    recorded_permissions: np.ndarray | None = None,
    recorded_arrivals: np.ndarray | None = None,
    phase_target: np.ndarray | None = None,
) -> UniCommOutput:
    """Run the communication model on a packed batch.

    Without recorded data this is inference: arrivals use the predicted
    permissions.  With ``recorded_permissions`` (flat, one bit per movement
    row) and ``recorded_arrivals`` (flat, one value per slot) the two losses
    are attached.  ``phase_target`` overrides the permission target of the
    phase loss only.
    """
    H = embed_movements(store, batch.counts, batch.permission, batch.turns)
    gp = predict_permissions(store, H, groups=batch.row_offsets)
    if recorded_permissions is None:
        return UniCommOutput(predict_arrivals(store, H, gp, batch.slot_incidence), gp)
    l_rec = predict_arrivals(store, H, recorded_permissions, batch.slot_incidence)
    target = recorded_permissions if phase_target is None else phase_target
    lp, lv = losses(gp, target, l_rec, recorded_arrivals)
    return UniCommOutput(l_rec, gp, lp, lv)

