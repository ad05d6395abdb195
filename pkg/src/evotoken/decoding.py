"""Blockwise progressive decoding, the hard-masking baseline, and NFE schedules.

One decode step = one model forward over the assembled embeddings, a top-K
renormalization per generated position, best-candidate tracking, promotion of
a transition set into Soft(V), an all-soft block finalization check, and a
re-assignment of every slot embedding.  Blocks are strictly sequential; the
compute budget (number of forward passes) is fixed up front by the schedule.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import MASK_ID
from .errors import ConfigError, ContractError, InfeasibleScheduleError
from .evolution import (
    TokenSlot,
    TokenState,
    assign_embedding,
    maybe_decode_block,
    soft_embedding,
    topk_renormalize,
    update_best,
    update_states,
)
from .model import TransformerParams, embed_tokens, forward
from .tensor import no_grad, softmax_array


@dataclass(frozen=True)
class InferConfig:
    gen_len: int
    block_size: int
    nfe_ratio: float = 1.0
    topk: int = 8
    alpha: float = 0.7
    temperature: float = 0.5
    seed: int = 42
    cache_enabled: bool = False
    threshold: float | None = None

    def __post_init__(self):
        if self.gen_len <= 0:
            raise ConfigError("gen_len must be positive")
        if not 1 <= self.block_size <= self.gen_len:
            raise ConfigError(f"block_size must be in [1, {self.gen_len}]")
        if not 0 < self.nfe_ratio <= 1:
            raise ConfigError("nfe_ratio must be in (0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.topk < 1:
            raise ConfigError("topk must be >= 1")
        if not 0 <= self.alpha <= 1:
            raise ConfigError("alpha must be in [0, 1]")
        if self.threshold is not None and not 0 < self.threshold <= 1:
            raise ConfigError("threshold must be in (0, 1]")


def block_bounds(gen_len: int, block_size: int) -> list[tuple[int, int]]:
    """Contiguous block ranges; the final block may be partial."""
    return [(s, min(s + block_size, gen_len)) for s in range(0, gen_len, block_size)]


def _allocate_steps(total: int, sizes: list[int]) -> list[int]:
    """Split a step budget across blocks proportionally to their sizes.

    Largest-remainder rounding with each block clamped to [1, size]; ties go
    to the earlier block.
    """
    n, full = len(sizes), sum(sizes)
    if total < n:
        raise InfeasibleScheduleError(
            f"budget of {total} steps cannot cover {n} blocks (each needs >= 1)"
        )
    raw = [total * s / full for s in sizes]
    steps = [min(sizes[i], max(1, int(raw[i]))) for i in range(n)]
    while sum(steps) < total:
        cands = [i for i in range(n) if steps[i] < sizes[i]]
        i = min(cands, key=lambda i: (-(raw[i] - steps[i]), i))
        steps[i] += 1
    while sum(steps) > total:
        cands = [i for i in range(n) if steps[i] > 1]
        i = min(cands, key=lambda i: (raw[i] - steps[i], i))
        steps[i] -= 1
    return steps


def plan_schedule(config: InferConfig) -> list[list[int]]:
    """Per-block lists of transition counts; each list sums to the block size.

    Counts within a block are as uniform as possible (spread <= 1) with the
    remainder on the earliest steps; total steps across blocks equal
    round(gen_len * nfe_ratio).
    """
    sizes = [e - s for s, e in block_bounds(config.gen_len, config.block_size)]
    total = int(round(config.gen_len * config.nfe_ratio))
    steps = _allocate_steps(total, sizes)
    schedule = []
    for size, nsteps in zip(sizes, steps):
        base, rem = divmod(size, nsteps)
        schedule.append([base + 1] * rem + [base] * (nsteps - rem))
    return schedule


class BlockPrefixCache:
    """Frozen attention k/v for the prompt plus completed blocks.

    Approximate by construction: bidirectional attention would keep updating
    prefix activations as the suffix evolves, but entries here are computed
    once when a block completes and reused unchanged.
    """

    def __init__(self, layers: int, fingerprint):
        self.end = 0
        self.layers: list[tuple[np.ndarray, np.ndarray] | None] = [None] * layers
        self.fingerprint = fingerprint

    def absorb(self, kvs, upto: int) -> None:
        take = upto - self.end
        if take <= 0:
            return
        for li, (k, v) in enumerate(kvs):
            k_new, v_new = k[:, :take], v[:, :take]
            if self.layers[li] is None:
                self.layers[li] = (k_new.copy(), v_new.copy())
            else:
                ck, cv = self.layers[li]
                self.layers[li] = (
                    np.concatenate([ck, k_new], axis=1),
                    np.concatenate([cv, v_new], axis=1),
                )
        self.end = upto


def block_prefix_cache(state: "SequenceState", params: TransformerParams) -> BlockPrefixCache:
    """Handle to the sequence's prefix cache; only valid once a block is done."""
    if state.cursor <= 0:
        raise ContractError("prefix cache requires at least one completed block")
    if state.cache is None:
        state.cache = BlockPrefixCache(params.config.layers, params.fingerprint())
    elif state.cache.fingerprint != params.fingerprint():
        raise ContractError("parameters changed since the cache was built")
    return state.cache


@dataclass
class SequenceState:
    """Everything one decoding run mutates: slots, cursor, budget, trace."""

    prompt_ids: np.ndarray
    slots: list[TokenSlot]
    bounds: list[tuple[int, int]]
    schedule: list[list[int]] | None
    rng: np.random.Generator
    cursor: int = 0
    step_in_block: int = 0
    nfe: int = 0
    trace: list[dict] = field(default_factory=list)
    cache: BlockPrefixCache | None = None


def init_sequence(prompt_ids, params: TransformerParams, config: InferConfig) -> SequenceState:
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    if len(prompt_ids) + config.gen_len > params.config.max_len:
        raise ConfigError(
            f"prompt ({len(prompt_ids)}) + gen_len ({config.gen_len}) exceeds "
            f"model max length {params.config.max_len}"
        )
    e_mask = params.mask_embedding()
    slots = [TokenSlot(TokenState.MASK, e_mask.copy()) for _ in range(config.gen_len)]
    schedule = None if config.threshold is not None else plan_schedule(config)
    return SequenceState(
        prompt_ids=prompt_ids,
        slots=slots,
        bounds=block_bounds(config.gen_len, config.block_size),
        schedule=schedule,
        rng=np.random.default_rng(config.seed),
    )


def select_transition_set(block_slots, count: int) -> set[int]:
    """The ``count`` eligible positions with highest head confidence.

    Eligible means Mask or Soft(Mask u V); ties break toward the lower index.
    """
    eligible = [
        i for i, s in enumerate(block_slots)
        if s.state in (TokenState.MASK, TokenState.SOFT_MASK_VOCAB)
    ]
    if count < 0:
        raise ContractError("transition count must be nonnegative")
    if count > len(eligible):
        warnings.warn(
            f"transition count {count} exceeds {len(eligible)} eligible positions; clamping",
            stacklevel=2,
        )
        count = len(eligible)
    for i in eligible:
        if block_slots[i].dist is None:
            raise ContractError(f"eligible position {i} has no prediction yet")
    ranked = sorted(eligible, key=lambda i: (-block_slots[i].dist.head_prob, i))
    return set(ranked[:count])


def _threshold_set(block_slots, threshold: float) -> set[int]:
    # every eligible position at or above the bar, but always at least one
    eligible = [
        i for i, s in enumerate(block_slots)
        if s.state in (TokenState.MASK, TokenState.SOFT_MASK_VOCAB)
    ]
    passing = [i for i in eligible if block_slots[i].dist.head_prob >= threshold]
    if passing:
        return set(passing)
    best = min(eligible, key=lambda i: (-block_slots[i].dist.head_prob, i))
    return {best}


def _predict(state: SequenceState, params, config, logits_fn):
    """Run the model over current embeddings; returns (first predicted
    absolute position, temperature-shaped probabilities from there on)."""
    prompt_len = len(state.prompt_ids)
    emb = np.concatenate(
        [
            params.embedding.data[state.prompt_ids],
            np.stack([slot.embedding for slot in state.slots]),
        ]
    )
    if logits_fn is not None:
        logits = np.asarray(logits_fn(emb))
        pred_start = 0
    elif config.cache_enabled and state.cursor > 0:
        cache = block_prefix_cache(state, params)
        target = prompt_len + state.bounds[state.cursor][0]
        start = cache.end
        with no_grad():
            if start < target:
                out, kvs = forward(
                    params,
                    emb[start:],
                    pos_offset=start,
                    kv_cache=cache.layers,
                    return_kv=True,
                )
                cache.absorb(kvs, target)
            else:
                out = forward(params, emb[start:], pos_offset=start, kv_cache=cache.layers)
        logits = out.data
        pred_start = start
    else:
        with no_grad():
            logits = forward(params, emb).data
        pred_start = 0
    return pred_start, softmax_array(logits, temperature=config.temperature)


def step(state: SequenceState, params: TransformerParams, config: InferConfig, *, logits_fn=None) -> None:
    """One refinement pass: predict, track, transition, maybe decode, reassign."""
    if state.cursor >= len(state.bounds):
        raise ContractError("sequence already fully decoded")
    s, e = state.bounds[state.cursor]
    block = state.slots[s:e]
    if all(slot.state is TokenState.DECODE for slot in block):
        raise ContractError("current block has no undecoded slots")

    prompt_len = len(state.prompt_ids)
    pred_start, probs = _predict(state, params, config, logits_fn)
    for abs_pos in range(max(pred_start, prompt_len), prompt_len + config.gen_len):
        state.slots[abs_pos - prompt_len].dist = topk_renormalize(
            probs[abs_pos - pred_start], config.topk
        )

    for slot in block:
        if slot.state is TokenState.SOFT_VOCAB:
            update_best(slot, slot.dist)

    if config.threshold is not None:
        chosen = _threshold_set(block, config.threshold)
    else:
        counts = state.schedule[state.cursor]
        if state.step_in_block >= len(counts):
            raise ContractError("block schedule exhausted before decode fired")
        chosen = select_transition_set(block, counts[state.step_in_block])
    update_states(block, chosen)
    fired = maybe_decode_block(block)

    e_mask = params.mask_embedding()
    table = params.embedding.data
    for slot in state.slots:
        e_dist = soft_embedding(slot.dist, table) if slot.dist is not None else None
        slot.embedding = assign_embedding(slot, e_dist, e_mask, config.alpha, table)

    state.nfe += 1
    state.trace.append(_trace_event(state, state.cursor))
    if fired:
        state.cursor += 1
        state.step_in_block = 0
    else:
        state.step_in_block += 1


def generate(prompt_ids, params: TransformerParams, config: InferConfig, *, logits_fn=None):
    """Decode ``gen_len`` tokens blockwise; returns (ids, final SequenceState).

    Deterministic given (seed, params, config): confidence ranking is exact,
    temperature only shapes the distributions.  The state's trace holds one
    event per forward pass (so ``len(trace) == nfe``).
    """
    state = init_sequence(prompt_ids, params, config)
    for b in range(len(state.bounds)):
        s, e = state.bounds[b]
        while not all(slot.state is TokenState.DECODE for slot in state.slots[s:e]):
            step(state, params, config, logits_fn=logits_fn)
    ids = np.array([slot.decoded_id for slot in state.slots], dtype=np.int64)
    return ids, state


def generate_thresholded(prompt_ids, params: TransformerParams, config: InferConfig):
    """Confidence-threshold decoding; returns (ids, state, stats).

    Each step promotes every eligible position whose head probability clears
    the threshold, or the single most confident one so progress is guaranteed.
    """
    if config.threshold is None:
        raise ConfigError("generate_thresholded requires config.threshold")
    ids, state = generate(prompt_ids, params, config)
    stats = {
        "steps": state.nfe,
        "avg_tokens_per_step": config.gen_len / state.nfe,
    }
    return ids, state, stats


def generate_baseline_mdlm(prompt_ids, params: TransformerParams, config: InferConfig):
    """Standard blockwise confidence decoding over hard tokens.

    Masked positions stay at the literal mask id until selected; each step
    finalizes the scheduled count of highest-confidence positions at their
    argmax token.  Returns (ids, nfe).
    """
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    if len(prompt_ids) + config.gen_len > params.config.max_len:
        raise ConfigError("prompt + gen_len exceeds model max length")
    schedule = plan_schedule(config)
    bounds = block_bounds(config.gen_len, config.block_size)
    prompt_len = len(prompt_ids)
    ids = np.concatenate([prompt_ids, np.full(config.gen_len, MASK_ID, dtype=np.int64)])
    nfe = 0
    for (s, e), counts in zip(bounds, schedule):
        for count in counts:
            with no_grad():
                logits = forward(params, embed_tokens(params, ids)).data
            probs = softmax_array(logits, temperature=config.temperature)
            nfe += 1
            masked = [i for i in range(prompt_len + s, prompt_len + e) if ids[i] == MASK_ID]
            picks = sorted(masked, key=lambda i: (-probs[i].max(), i))[:count]
            for i in picks:
                ids[i] = int(probs[i].argmax())
    return ids[prompt_len:], nfe


def _trace_event(state: SequenceState, block_idx: int) -> dict:
    positions = []
    for slot in state.slots:
        positions.append(
            {
                "state": slot.state.value,
                "topk_ids": None if slot.dist is None else [int(i) for i in slot.dist.ids],
                "topk_probs": None
                if slot.dist is None
                else [round(float(p), 6) for p in slot.dist.probs],
                "best_id": slot.best_id,
                "best_conf": slot.best_conf,
            }
        )
    return {"step": state.nfe, "block": block_idx, "positions": positions}


def write_trace(events, fh) -> None:
    """Line-delimited JSON with stable key order, one record per step."""
    for event in events:
        fh.write(json.dumps(event, sort_keys=True, separators=(",", ":")) + "\n")
