"""Desk-scale diffusion language modeling with evolving soft tokens.

A generated position is not flipped from mask to token in one shot: it walks
through mask-blended and fully soft probability-weighted embeddings before a
whole block finalizes at its historically most confident predictions.
Training replays that refinement loop with a loss and update at every step.
"""

from .data import (
    EOS_ID,
    MASK_ID,
    PAD_ID,
    UNK_ID,
    Sample,
    Vocabulary,
    extract_response,
    gen_task,
    load_jsonl,
    pad_target_ids,
    save_jsonl,
)
from .decoding import (
    InferConfig,
    SequenceState,
    block_bounds,
    block_prefix_cache,
    generate,
    generate_baseline_mdlm,
    generate_thresholded,
    init_sequence,
    plan_schedule,
    select_transition_set,
    step,
    write_trace,
)
from .evolution import (
    MixConfig,
    SoftDist,
    TokenSlot,
    TokenState,
    assign_embedding,
    maybe_decode_block,
    mix_mask,
    soft_embedding,
    topk_renormalize,
    update_best,
    update_states,
)
from .model import (
    ModelConfig,
    TransformerParams,
    embed_tokens,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import (
    OptimizerState,
    Tensor,
    backward,
    cross_entropy,
    matmul,
    no_grad,
    optimizer_step,
    parameter,
    set_default_dtype,
    softmax,
    softmax_array,
)
from .training import (
    TrainConfig,
    TrainingState,
    Trajectory,
    evaluate_exact_match,
    fit,
    forward_corrupt,
    init_trajectory,
    mdlm_loss,
    unroll_and_supervise,
)

__version__ = "0.1.0"
