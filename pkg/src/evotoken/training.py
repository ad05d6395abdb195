"""Trajectory-supervised training and the weighted-masked-CE baseline.

Each training iteration replays the decoder for a handful of refinement
steps on one target block: forward, cross-entropy against the ground truth,
backward, parameter update, then the same state/embedding transition the
decoder would apply.  Predicted soft embeddings cross step boundaries as
constants, so every step optimizes a step-local graph.  The baseline mode
("FT-Base" control) trains the identical model with the standard masked
denoising objective instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import MASK_ID, Sample, Vocabulary, extract_response, pad_target_ids
from .decoding import InferConfig, generate, generate_baseline_mdlm, select_transition_set
from .errors import ConfigError, ContractError, DegenerateBatchError, NumericError
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
from .model import ModelConfig, TransformerParams, embed_tokens, forward, init_params, save_checkpoint
from .tensor import OptimizerState, Tensor, backward, cross_entropy, no_grad, optimizer_step, softmax_array


@dataclass(frozen=True)
class TrainConfig:
    refine_steps: int = 4
    block_len: int = 8
    transition_pool: tuple[int, ...] = (1, 2, 4, 8)
    alpha_low: float = 0.5
    alpha_high: float = 1.0
    lr: float = 3e-4
    batch_size: int = 1
    max_seq_len: int = 256
    iterations: int = 1000
    seed: int = 0
    target_len: int = 16
    topk: int = 8
    soft_fraction: float | None = None  # None: fresh uniform draw per trajectory

    def __post_init__(self):
        if self.refine_steps < 1:
            raise ConfigError("refine_steps must be >= 1")
        if self.block_len < 1:
            raise ConfigError("block_len must be >= 1")
        if not self.transition_pool or any(c < 1 or c > self.block_len for c in self.transition_pool):
            raise ConfigError("transition pool entries must lie in [1, block_len]")
        if not 0 <= self.alpha_low <= self.alpha_high <= 1:
            raise ConfigError("alpha bounds must satisfy 0 <= low <= high <= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be nonnegative")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("batch_size must be >= 1 and iterations >= 0")
        if self.target_len < 2:
            raise ConfigError("target_len must fit a response plus <eos>")
        if self.soft_fraction is not None and not 0 <= self.soft_fraction <= 1:
            raise ConfigError("soft_fraction must be in [0, 1]")


@dataclass
class TrainingState:
    params: TransformerParams
    opt_state: OptimizerState
    rng: np.random.Generator
    iteration: int = 0
    loss_history: list[float] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    forward_count: int = 0
    backward_count: int = 0
    optimizer_count: int = 0


def forward_corrupt(ids, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Independently replace each position with <mask> with the given probability."""
    if not 0 <= mask_ratio <= 1:
        raise ContractError(f"mask ratio must be in [0, 1], got {mask_ratio}")
    ids = np.asarray(ids, dtype=np.int64)
    out = ids.copy()
    out[rng.random(ids.shape) < mask_ratio] = MASK_ID
    return out


@dataclass
class Trajectory:
    """One training sequence mid-evolution: prompt, padded targets, slot states."""

    prompt_ids: np.ndarray
    target_ids: np.ndarray
    slots: list[TokenSlot]
    block: tuple[int, int]


def init_trajectory(
    sample: Sample,
    config: TrainConfig,
    rng: np.random.Generator,
    params: TransformerParams,
    vocab: Vocabulary,
) -> Trajectory:
    """Sample a target block and seed the slot states around it.

    Positions before the block are already-decoded ground truth, positions
    after it are masked, and the block itself splits randomly into
    ground-truth-initialized Soft(V) and Mask positions.
    """
    if not sample.response:
        raise ContractError("sample has an empty response")
    prompt_ids = vocab.encode(sample.prompt)
    target_ids = pad_target_ids(vocab, sample.response, config.target_len)
    n = len(target_ids)
    if len(prompt_ids) + n > min(config.max_seq_len, params.config.max_len):
        raise ConfigError("prompt plus target region exceeds the sequence budget")

    block_len = min(config.block_len, n)
    start = int(rng.integers(0, n - block_len + 1))
    block = (start, start + block_len)
    frac = config.soft_fraction if config.soft_fraction is not None else float(rng.random())
    soft_draws = rng.random(block_len) < frac

    table = params.embedding.data
    e_mask = table[MASK_ID]
    slots = []
    for j in range(n):
        if j < start:
            slots.append(
                TokenSlot(
                    TokenState.DECODE,
                    table[target_ids[j]].copy(),
                    decoded_id=int(target_ids[j]),
                )
            )
        elif j < block[1] and soft_draws[j - start]:
            slots.append(TokenSlot(TokenState.SOFT_VOCAB, table[target_ids[j]].copy()))
        else:
            slots.append(TokenSlot(TokenState.MASK, e_mask.copy()))
    return Trajectory(prompt_ids, target_ids, slots, block)


def _assemble(traj: Trajectory, params: TransformerParams) -> Tensor:
    """Differentiable input embeddings: table lookups for hard positions,
    constant soft/mixed vectors spliced in for evolving ones."""
    p = len(traj.prompt_ids)
    ids = np.empty(p + len(traj.target_ids), dtype=np.int64)
    ids[:p] = traj.prompt_ids
    soft_idx, soft_rows = [], []
    for j, slot in enumerate(traj.slots):
        pos = p + j
        if slot.state is TokenState.MASK:
            ids[pos] = MASK_ID
        elif slot.state is TokenState.DECODE:
            ids[pos] = slot.decoded_id
        elif slot.dist is None:
            ids[pos] = traj.target_ids[j]  # ground-truth init, before any prediction
        else:
            ids[pos] = MASK_ID  # placeholder row, value replaced below
            soft_idx.append(pos)
            soft_rows.append(slot.embedding)
    emb = embed_tokens(params, ids)
    if soft_idx:
        emb = T.replace_rows(emb, np.array(soft_idx), np.stack(soft_rows))
    return emb


def unroll_and_supervise(
    trajs,
    params: TransformerParams,
    opt_state: OptimizerState,
    config: TrainConfig,
    rng: np.random.Generator,
    *,
    metrics: list | None = None,
    iteration: int = 0,
    counters: TrainingState | None = None,
) -> list[float]:
    """Run the refinement steps with a loss and parameter update at each one.

    Accepts one trajectory or a batch (gradients averaged, one optimizer step
    per refinement step either way).  Per-step transition counts come from the
    configured pool, the final step promotes everything still eligible, and
    the mask-blend weight is drawn fresh each step.  Returns the per-step
    mean losses.
    """
    batch = [trajs] if isinstance(trajs, Trajectory) else list(trajs)
    if not batch:
        raise ContractError("empty trajectory batch")
    scale = 1.0 / len(batch)
    losses: list[float] = []
    for i in range(config.refine_steps):
        alpha = float(rng.uniform(config.alpha_low, config.alpha_high))
        count = int(config.transition_pool[rng.integers(len(config.transition_pool))])
        last = i == config.refine_steps - 1
        step_losses = []
        for traj in batch:
            p = len(traj.prompt_ids)
            s, e = traj.block
            emb = _assemble(traj, params)
            logits = forward(params, emb)
            block_logits = T.take_rows(logits, np.arange(p + s, p + e))
            loss = cross_entropy(block_logits, traj.target_ids[s:e])
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NumericError(
                    f"non-finite loss at iteration {iteration}, refinement step {i + 1}"
                )
            backward(loss * scale)
            step_losses.append(loss_val)
            if counters is not None:
                counters.forward_count += 1
                counters.backward_count += 1

            # decoder-style update from this pass's predictions (detached)
            region_probs = softmax_array(logits.data[p:])
            _update_slots(traj, region_probs, config, alpha, count, last, params)

        optimizer_step(params.all(), opt_state)
        if counters is not None:
            counters.optimizer_count += 1
        mean_loss = float(np.mean(step_losses))
        losses.append(mean_loss)
        if metrics is not None:
            metrics.append(
                {
                    "mode": "evotoken",
                    "iteration": iteration,
                    "step_index": i + 1,
                    "loss": mean_loss,
                    "alpha": alpha,
                    "s_count": count,
                    "lr": opt_state.lr,
                }
            )
    return losses


def _update_slots(traj, region_probs, config, alpha, count, last, params) -> None:
    s, e = traj.block
    block = traj.slots[s:e]
    for j in range(s, e):
        traj.slots[j].dist = topk_renormalize(region_probs[j], config.topk)
    for slot in block:
        if slot.state is TokenState.SOFT_VOCAB:
            update_best(slot, slot.dist)
    eligible = sum(
        slot.state in (TokenState.MASK, TokenState.SOFT_MASK_VOCAB) for slot in block
    )
    effective = eligible if last else min(count, eligible)
    chosen = select_transition_set(block, effective)
    update_states(block, chosen)
    maybe_decode_block(block)
    table = params.embedding.data
    e_mask = table[MASK_ID]
    for slot in block:
        e_dist = soft_embedding(slot.dist, table) if slot.dist is not None else None
        slot.embedding = assign_embedding(slot, e_dist, e_mask, alpha, table)


def mdlm_loss(params: TransformerParams, corrupted_ids, clean_ids, mask_ratio: float) -> Tensor:
    """Masked-positions cross-entropy scaled by the inverse corruption ratio."""
    if mask_ratio <= 0:
        raise ContractError("mask_ratio must be positive")
    corrupted = np.asarray(corrupted_ids, dtype=np.int64)
    clean = np.asarray(clean_ids, dtype=np.int64)
    if corrupted.shape != clean.shape:
        raise ContractError("corrupted and clean sequences must align")
    mask = corrupted == MASK_ID
    if not mask.any():
        raise DegenerateBatchError("no masked positions to supervise")
    logits = forward(params, embed_tokens(params, corrupted))
    return cross_entropy(logits, clean, weights=mask.astype(np.float64)) * (1.0 / mask_ratio)


MDLM_RATIO_FLOOR = 0.01  # bounds the 1/r weight


def evaluate_exact_match(
    params: TransformerParams,
    vocab: Vocabulary,
    samples,
    infer_config: InferConfig,
    decoder: str = "evotoken",
):
    """Fraction of samples whose decoded response matches exactly.

    Returns (accuracy, nfe_per_sequence).
    """
    if not samples:
        raise ContractError("no evaluation samples")
    hits = 0
    nfes = []
    for sample in samples:
        prompt_ids = vocab.encode(sample.prompt)
        if decoder == "evotoken":
            ids, state = generate(prompt_ids, params, infer_config)
            nfes.append(state.nfe)
        elif decoder == "mdlm":
            ids, nfe = generate_baseline_mdlm(prompt_ids, params, infer_config)
            nfes.append(nfe)
        else:
            raise ConfigError(f"unknown decoder {decoder!r}")
        hits += extract_response(vocab, ids) == sample.response
    return hits / len(samples), float(np.mean(nfes))


def fit(
    dataset,
    config: TrainConfig,
    mode: str,
    *,
    model_config: ModelConfig,
    vocab: Vocabulary,
    val_samples=None,
    infer_config: InferConfig | None = None,
    eval_every: int = 0,
    stop_at_em: float | None = None,
    checkpoint_every: int = 0,
    checkpoint_path=None,
    params: TransformerParams | None = None,
) -> TrainingState:
    """Train a model from scratch in either mode; returns the final state.

    mode "evotoken" runs trajectory supervision; "mdlm_baseline" trains the
    FT-Base control with the masked denoising objective under the same
    iteration budget.  Validation exact-match is computed every
    ``eval_every`` iterations (with the mode's own decoder) and training may
    stop early once ``stop_at_em`` is reached.
    """
    if mode not in ("evotoken", "mdlm_baseline"):
        raise ConfigError(f"unknown training mode {mode!r}")
    if vocab.size != model_config.vocab_size:
        raise ConfigError(
            f"vocabulary size {vocab.size} does not match model vocab {model_config.vocab_size}"
        )
    if eval_every and (val_samples is None or infer_config is None):
        raise ConfigError("eval_every requires val_samples and infer_config")
    dataset = [s for s in dataset if s.response]
    if not dataset:
        raise ContractError("dataset has no usable samples")

    if params is None:
        params = init_params(model_config)
    state = TrainingState(
        params=params,
        opt_state=OptimizerState(lr=config.lr),
        rng=np.random.default_rng(config.seed),
    )
    rng = state.rng
    all_params = params.all()

    for it in range(1, config.iterations + 1):
        state.iteration = it
        picks = rng.integers(0, len(dataset), size=config.batch_size)
        batch = [dataset[int(i)] for i in picks]

        if mode == "evotoken":
            trajs = [init_trajectory(s, config, rng, params, vocab) for s in batch]
            state.loss_history = unroll_and_supervise(
                trajs, params, state.opt_state, config, rng,
                metrics=state.metrics, iteration=it, counters=state,
            )
        else:
            step_losses = []
            ratios = []
            scale = 1.0 / len(batch)
            for sample in batch:
                prompt_ids = vocab.encode(sample.prompt)
                region = pad_target_ids(vocab, sample.response, config.target_len)
                ratio = float(rng.uniform(MDLM_RATIO_FLOOR, 1.0))
                corrupted_region = forward_corrupt(region, ratio, rng)
                if not (corrupted_region == MASK_ID).any():
                    # zero-contribution sample: force one masked position
                    corrupted_region[int(rng.integers(len(region)))] = MASK_ID
                corrupted = np.concatenate([prompt_ids, corrupted_region])
                clean = np.concatenate([prompt_ids, region])
                loss = mdlm_loss(params, corrupted, clean, ratio)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise NumericError(f"non-finite loss at iteration {it}")
                backward(loss * scale)
                state.forward_count += 1
                state.backward_count += 1
                step_losses.append(loss_val)
                ratios.append(ratio)
            optimizer_step(all_params, state.opt_state)
            state.optimizer_count += 1
            state.loss_history = [float(np.mean(step_losses))]
            state.metrics.append(
                {
                    "mode": "mdlm_baseline",
                    "iteration": it,
                    "loss": state.loss_history[0],
                    "mask_ratio": float(np.mean(ratios)),
                    "lr": config.lr,
                }
            )

        if eval_every and it % eval_every == 0:
            decoder = "evotoken" if mode == "evotoken" else "mdlm"
            with no_grad():
                em, _ = evaluate_exact_match(params, vocab, val_samples, infer_config, decoder)
            state.metrics.append({"mode": mode, "iteration": it, "val_exact_match": em})
            if stop_at_em is not None and em >= stop_at_em:
                break

        if checkpoint_every and checkpoint_path and it % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, params, vocab.symbols)

    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, vocab.symbols)
    return state
