"""Token evolution machinery: four-state slots and soft-embedding updates.

Each generated position carries a state that only ever moves forward:

    Mask -> Soft(Mask u V) -> Soft(V) -> Decode

where the middle stage may be skipped.  Soft states carry a top-K
renormalized distribution whose probability-weighted embedding (optionally
blended with the mask embedding) feeds the next model pass.  While a slot
sits in Soft(V) the highest-confidence prediction seen so far is recorded;
that record becomes the decoded token when the whole block finalizes.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, StateCorruptionError


class TokenState(enum.Enum):
    MASK = "mask"
    SOFT_MASK_VOCAB = "soft_mask_vocab"
    SOFT_VOCAB = "soft_vocab"
    DECODE = "decode"


# Forward-only DAG; Decode is absorbing.
LEGAL_TRANSITIONS = {
    TokenState.MASK: {TokenState.MASK, TokenState.SOFT_MASK_VOCAB, TokenState.SOFT_VOCAB},
    TokenState.SOFT_MASK_VOCAB: {TokenState.SOFT_MASK_VOCAB, TokenState.SOFT_VOCAB},
    TokenState.SOFT_VOCAB: {TokenState.SOFT_VOCAB, TokenState.DECODE},
    TokenState.DECODE: {TokenState.DECODE},
}


@dataclass(frozen=True)
class SoftDist:
    """Top-K token ids with renormalized probabilities, sorted descending."""

    ids: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "probs", probs)
        if ids.ndim != 1 or probs.shape != ids.shape or ids.size < 1:
            raise ContractError("SoftDist needs matching 1-D ids/probs, K >= 1")
        if len(np.unique(ids)) != ids.size:
            raise ContractError("SoftDist ids must be distinct")
        if (probs < 0).any():
            raise ContractError("SoftDist probs must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-6:
            raise ContractError(f"SoftDist probs sum to {probs.sum()}, not 1")
        if (np.diff(probs) > 1e-12).any():
            raise ContractError("SoftDist probs must be sorted descending")

    @property
    def head_id(self) -> int:
        return int(self.ids[0])

    @property
    def head_prob(self) -> float:
        return float(self.probs[0])


@dataclass(frozen=True)
class MixConfig:
    """Mask-blend weight and top-K width for soft embedding construction."""

    alpha: float
    topk: int

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.topk < 1:
            raise ContractError(f"topk must be >= 1, got {self.topk}")


@dataclass
class TokenSlot:
    """Per-position evolution record."""

    state: TokenState
    embedding: np.ndarray
    dist: SoftDist | None = None
    best_id: int | None = None
    best_conf: float = 0.0
    decoded_id: int | None = None


def topk_renormalize(probs, k: int) -> SoftDist:
    """Keep the K most probable ids and rescale to sum 1; ties go to lower id."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ContractError("topk_renormalize expects a 1-D distribution")
    if abs(probs.sum() - 1.0) > 1e-4:
        raise ContractError(f"input probs sum to {probs.sum()}, not 1")
    v = probs.size
    if k > v:
        warnings.warn(f"topk {k} exceeds vocabulary {v}; clamping", stacklevel=2)
        k = v
    order = np.argsort(-probs, kind="stable")[:k]
    kept = probs[order]
    return SoftDist(order, kept / kept.sum())


def soft_embedding(dist: SoftDist, table: np.ndarray) -> np.ndarray:
    """Probability-weighted mix of embedding rows (a convex-hull point)."""
    return dist.probs @ table[dist.ids]


def mix_mask(e_dist: np.ndarray, e_mask: np.ndarray, alpha: float) -> np.ndarray:
    """alpha * mask embedding + (1 - alpha) * distribution embedding."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * e_mask + (1.0 - alpha) * e_dist


def assign_embedding(
    slot: TokenSlot,
    e_dist: np.ndarray | None,
    e_mask: np.ndarray,
    alpha: float,
    table: np.ndarray,
) -> np.ndarray:
    """The embedding a slot contributes to the next model pass, by state."""
    if slot.state is TokenState.MASK:
        return e_mask.copy()
    if slot.state is TokenState.DECODE:
        if slot.decoded_id is None:
            raise StateCorruptionError("Decode slot without a decoded id")
        return table[slot.decoded_id].copy()
    if e_dist is None:
        raise StateCorruptionError(f"{slot.state.value} slot without a distribution embedding")
    if slot.state is TokenState.SOFT_MASK_VOCAB:
        return mix_mask(e_dist, e_mask, alpha)
    return np.array(e_dist, copy=True)  # SOFT_VOCAB


def update_states(block_slots, chosen) -> None:
    """Advance block states for one step given the transition set ``chosen``.

    ``chosen`` holds indices into ``block_slots``.  Selected slots move to
    Soft(V) (recording their current head as the first best candidate);
    remaining Mask slots move to Soft(Mask u V); later states are untouched.
    """
    chosen = set(int(i) for i in chosen)
    for i in chosen:
        if not 0 <= i < len(block_slots):
            raise ContractError(f"transition index {i} outside block")
        if block_slots[i].state is TokenState.DECODE:
            raise ContractError(f"transition set includes decoded position {i}")
    for i, slot in enumerate(block_slots):
        if i in chosen and slot.state in (TokenState.MASK, TokenState.SOFT_MASK_VOCAB):
            slot.state = TokenState.SOFT_VOCAB
            if slot.dist is not None:
                slot.best_id = slot.dist.head_id
                slot.best_conf = slot.dist.head_prob
        elif slot.state is TokenState.MASK:
            slot.state = TokenState.SOFT_MASK_VOCAB


def update_best(slot: TokenSlot, dist: SoftDist) -> None:
    """Keep the highest-confidence prediction seen while in Soft(V).

    Strict improvement replaces the record; ties keep the earlier one.
    """
    if slot.state is not TokenState.SOFT_VOCAB:
        raise ContractError(f"update_best called in state {slot.state.value}")
    if dist.head_prob > slot.best_conf:
        slot.best_id = dist.head_id
        slot.best_conf = dist.head_prob


def maybe_decode_block(block_slots) -> bool:
    """Finalize the block once every slot is Soft(V); absorbing afterwards."""
    if not all(s.state is TokenState.SOFT_VOCAB for s in block_slots):
        return False
    for slot in block_slots:
        if slot.best_id is None:
            raise StateCorruptionError("Soft(V) slot reached decode without a best candidate")
        slot.state = TokenState.DECODE
        slot.decoded_id = slot.best_id
    return True
