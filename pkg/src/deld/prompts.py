"""Per-generator soft prompts and their ordered composition.

Each generator gets one trainable prompt matrix. Once a generator's prompt
is trained it is frozen for good; composition stacks prompts newest-first in
front of (or, in append mode, after) the article embedding, so the composed
input grows by one prompt block per learned generator.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import EncoderState
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Parameter, Tensor

BANK_MAGIC = b"DELDBNK\x00"
BANK_VERSION = 1

POSITION_MODES = ("prepend", "append")


@dataclass
class SoftPrompt:
    generator_id: str
    matrix: Parameter  # (prompt_len x d)
    frozen: bool = False

    @property
    def prompt_len(self) -> int:
        return self.matrix.shape[0]

    def snapshot(self) -> bytes:
        return self.matrix.data.astype("<f8").tobytes()


@dataclass
class PromptBank:
    position_mode: str = "prepend"
    prompts: list[SoftPrompt] = field(default_factory=list)

    def __post_init__(self):
        if self.position_mode not in POSITION_MODES:
            raise ConfigError(f"position_mode must be one of {POSITION_MODES}, got {self.position_mode!r}")

    def __len__(self) -> int:
        return len(self.prompts)

    @property
    def total_rows(self) -> int:
        return sum(p.prompt_len for p in self.prompts)

    def add(self, prompt: SoftPrompt) -> None:
        if any(p.generator_id == prompt.generator_id for p in self.prompts):
            raise ContractError(f"duplicate generator id {prompt.generator_id!r} in bank")
        if self.prompts and not self.prompts[-1].frozen:
            raise ContractError("previous prompt must be frozen before adding a new one")
        self.prompts.append(prompt)

    def get(self, generator_id: str) -> SoftPrompt:
        for p in self.prompts:
            if p.generator_id == generator_id:
                return p
        raise ContractError(f"no prompt for generator {generator_id!r}")


def init_prompt(generator_id: str, prompt_len: int, encoder: EncoderState, seed: int) -> SoftPrompt:
    """New trainable prompt whose rows are copies of sampled vocabulary embeddings."""
    if prompt_len < 1:
        raise ConfigError(f"prompt length must be >= 1, got {prompt_len}")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, encoder.config.vocab_size, size=prompt_len)
    return SoftPrompt(generator_id=generator_id,
                      matrix=Parameter(encoder.token_embeddings.data[rows].copy()))


def freeze_prompt(bank: PromptBank, generator_id: str) -> PromptBank:
    """Freeze the newest prompt; freezing anything else is a contract breach."""
    prompt = bank.get(generator_id)
    if prompt is not bank.prompts[-1]:
        raise ContractError(f"{generator_id!r} is not the newest prompt; freeze in learning order")
    prompt.frozen = True
    prompt.matrix.trainable = False
    return bank


def compose_input(bank: PromptBank, article_embed: Tensor,
                  article_mask=None) -> tuple[Tensor, slice, np.ndarray]:
    """Stack the bank's prompts with an article embedding.

    Prepend mode lays out [newest prompt; ...; oldest prompt; article];
    append mode puts the article first and the prompts (still newest-first)
    after it. Returns the composed rows, the slice covering the article, and
    the attention mask (prompt rows always attend; article rows keep their
    own PAD mask).
    """
    batched = article_embed.ndim == 3
    n = article_embed.shape[-2]
    d = article_embed.shape[-1]
    for p in bank.prompts:
        if p.matrix.shape[1] != d:
            raise DimensionError(
                f"prompt {p.generator_id!r} width {p.matrix.shape[1]} does not match article width {d}")

    if article_mask is None:
        article_mask = np.ones(article_embed.shape[:-1], dtype=bool)
    else:
        article_mask = np.asarray(article_mask, dtype=bool)
        if article_mask.shape != article_embed.shape[:-1]:
            raise DimensionError(
                f"article mask shape {article_mask.shape} does not match {article_embed.shape}")

    if not bank.prompts:
        return article_embed, slice(0, n), article_mask

    newest_first = list(reversed(bank.prompts))
    if batched:
        b = article_embed.shape[0]
        blocks = [T.tile_rows(p.matrix.value, b) for p in newest_first]
        prompt_mask = np.ones((b, bank.total_rows), dtype=bool)
    else:
        blocks = [p.matrix.value for p in newest_first]
        prompt_mask = np.ones(bank.total_rows, dtype=bool)

    k_rows = bank.total_rows
    if bank.position_mode == "prepend":
        composed = T.concat_rows(blocks + [article_embed])
        span = slice(k_rows, k_rows + n)
        mask = np.concatenate([prompt_mask, article_mask], axis=-1)
    else:
        composed = T.concat_rows([article_embed] + blocks)
        span = slice(0, n)
        mask = np.concatenate([article_mask, prompt_mask], axis=-1)
    return composed, span, mask


# ---------------------------------------------------------------------------
# serialization: same container style as encoder weights, ids length-prefixed

def save_bank(bank: PromptBank, path: str) -> None:
    with open(path, "wb") as f:
        f.write(BANK_MAGIC)
        f.write(struct.pack("<II", BANK_VERSION, len(bank.prompts)))
        f.write(struct.pack("<B", POSITION_MODES.index(bank.position_mode)))
        for p in bank.prompts:
            ident = p.generator_id.encode("utf-8")
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(struct.pack("<IIB", p.matrix.shape[0], p.matrix.shape[1], int(p.frozen)))
            f.write(p.matrix.data.astype("<f8").tobytes())


def load_bank(path: str) -> PromptBank:
    with open(path, "rb") as f:
        if f.read(len(BANK_MAGIC)) != BANK_MAGIC:
            raise ConfigError(f"{path}: not a prompt bank file")
        version, count = struct.unpack("<II", f.read(8))
        if version != BANK_VERSION:
            raise ConfigError(f"{path}: unsupported format version {version}")
        mode = POSITION_MODES[struct.unpack("<B", f.read(1))[0]]
        bank = PromptBank(position_mode=mode)
        for _ in range(count):
            idlen = struct.unpack("<I", f.read(4))[0]
            ident = f.read(idlen).decode("utf-8")
            rows, cols, frozen = struct.unpack("<IIB", f.read(9))
            data = np.frombuffer(f.read(rows * cols * 8), dtype="<f8").reshape(rows, cols)
            prompt = SoftPrompt(generator_id=ident,
                                matrix=Parameter(data.astype(np.float64), trainable=not frozen),
                                frozen=bool(frozen))
            bank.prompts.append(prompt)
    return bank
