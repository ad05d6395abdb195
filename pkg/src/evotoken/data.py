"""Character-level vocabulary, synthetic task generators, JSONL datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, SequenceLengthError, VocabularyError

MASK_ID = 0
PAD_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<mask>", "<pad>", "<eos>", "<unk>")
NUM_RESERVED = len(RESERVED_TOKENS)

# 60 printable characters; with the 4 reserved ids this fills a 64-entry vocab.
DEFAULT_ALPHABET = (
    "abcdefghijklmnopqrstuvwxyz"
    "0123456789"
    " +-*/=.,:;?!'()[]<>_#%&@"
)


@dataclass(frozen=True)
class Vocabulary:
    """Bijective symbol<->id map with reserved ids pinned at 0-3."""

    symbols: str = DEFAULT_ALPHABET
    _to_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise VocabularyError("vocabulary symbols must be distinct")
        object.__setattr__(
            self, "_to_id", {ch: NUM_RESERVED + i for i, ch in enumerate(self.symbols)}
        )

    @property
    def size(self) -> int:
        return NUM_RESERVED + len(self.symbols)

    def encode(self, text: str) -> np.ndarray:
        return np.array([self._to_id.get(ch, UNK_ID) for ch in text], dtype=np.int64)

    def decode(self, ids, keep_special: bool = False) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= self.size:
                raise VocabularyError(f"id {i} outside vocabulary of size {self.size}")
            if i < NUM_RESERVED:
                if keep_special:
                    out.append(RESERVED_TOKENS[i])
                continue
            out.append(self.symbols[i - NUM_RESERVED])
        return "".join(out)


def pad_target_ids(vocab: Vocabulary, response: str, length: int) -> np.ndarray:
    """response chars + <eos>, right-filled with <pad> to a fixed region length."""
    ids = vocab.encode(response)
    if len(ids) + 1 > length:
        raise SequenceLengthError(
            f"response of {len(ids)} chars does not fit region of {length}"
        )
    out = np.full(length, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    out[len(ids)] = EOS_ID
    return out


def extract_response(vocab: Vocabulary, ids) -> str:
    """Decode generated ids, cutting at the first <eos> and dropping pads."""
    ids = list(int(i) for i in ids)
    if EOS_ID in ids:
        ids = ids[: ids.index(EOS_ID)]
    return vocab.decode([i for i in ids if i != PAD_ID])


@dataclass
class Sample:
    prompt: str
    response: str
    task: str = ""
    seed: int | None = None


def gen_task(task: str, n: int, seed: int) -> list[Sample]:
    """Deterministic synthetic samples for one of copy / reverse / addition."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    letters = "abcdefghijklmnopqrstuvwxyz"
    samples = []
    for _ in range(n):
        if task == "copy":
            k = int(rng.integers(4, 11))
            payload = "".join(letters[i] for i in rng.integers(0, 26, size=k))
            samples.append(Sample(payload, payload, task=task, seed=seed))
        elif task == "reverse":
            k = int(rng.integers(4, 11))
            payload = "".join(letters[i] for i in rng.integers(0, 26, size=k))
            samples.append(Sample(payload, payload[::-1], task=task, seed=seed))
        elif task == "addition":
            a = int(rng.integers(10, 1000))
            b = int(rng.integers(10, 1000))
            samples.append(Sample(f"{a}+{b}=", str(a + b), task=task, seed=seed))
        else:
            raise ValueError(f"unknown task {task!r}")
    return samples


def save_jsonl(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {"prompt": s.prompt, "response": s.response}
            if s.task:
                rec["task"] = s.task
            if s.seed is not None:
                rec["seed"] = s.seed
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_jsonl(path) -> list[Sample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("prompt", "response"):
                if key not in rec or not isinstance(rec[key], str):
                    raise DatasetError(f"{path}:{lineno}: missing string field {key!r}")
            samples.append(
                Sample(
                    rec["prompt"],
                    rec["response"],
                    task=rec.get("task", ""),
                    seed=rec.get("seed"),
                )
            )
    return samples
