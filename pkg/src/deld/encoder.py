"""Miniature transformer encoder used as the frozen backbone.

The encoder is pre-trained once with masked-token prediction on the working
corpus, then frozen and shared by every experiment regime. Inputs arrive in
embedding space (prompt rows plus article rows), so the sequence length the
encoder sees is the composed row count, not just the article length.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, ContractError, DimensionError
from .tensor import Parameter, Tensor

MAGIC = b"DELDENC\x00"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 2000
    n_max: int = 128
    prompt_capacity: int = 160  # extra positional rows reserved for prompts
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1 or self.n_max < 1:
            raise ConfigError(f"layers and n_max must be >= 1, got {self.layers}, {self.n_max}")
        if self.heads < 1 or self.d % self.heads != 0:
            raise ConfigError(f"embedding dim {self.d} not divisible by {self.heads} heads")
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must cover PAD/MASK/UNK plus content, got {self.vocab_size}")
        if self.prompt_capacity < 0:
            raise ConfigError(f"prompt_capacity must be >= 0, got {self.prompt_capacity}")

    @property
    def max_rows(self) -> int:
        return self.n_max + self.prompt_capacity

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass
class LayerWeights:
    wq: Parameter
    bq: Parameter
    wk: Parameter
    bk: Parameter
    wv: Parameter
    bv: Parameter
    wo: Parameter
    bo: Parameter
    ln1_gamma: Parameter
    ln1_beta: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    ln2_gamma: Parameter
    ln2_beta: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
                self.ln1_gamma, self.ln1_beta, self.w1, self.b1, self.w2, self.b2,
                self.ln2_gamma, self.ln2_beta]


@dataclass
class EncoderState:
    config: EncoderConfig
    token_embeddings: Parameter
    positional: Parameter
    layers: list[LayerWeights]
    frozen: bool = False

    def parameters(self) -> list[Parameter]:
        """All parameters in declaration order (also the serialization order)."""
        params = [self.token_embeddings, self.positional]
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def state_bytes(self) -> bytes:
        """Raw little-endian float64 concatenation; useful for snapshot diffs."""
        return b"".join(p.data.astype("<f8").tobytes() for p in self.parameters())


def init_encoder(config: EncoderConfig) -> EncoderState:
    """Fresh unfrozen encoder with scaled normal init, deterministic in the seed."""
    rng = np.random.default_rng(config.seed)
    d, ffn = config.d, config.ffn_dim
    proj_std = 1.0 / np.sqrt(d)

    def normal(shape, std):
        return Parameter(rng.normal(0.0, std, size=shape))

    tok = normal((config.vocab_size, d), 0.02)
    pos = normal((config.max_rows, d), 0.02)
    layers = []
    for _ in range(config.layers):
        layers.append(LayerWeights(
            wq=normal((d, d), proj_std), bq=Parameter(np.zeros(d)),
            wk=normal((d, d), proj_std), bk=Parameter(np.zeros(d)),
            wv=normal((d, d), proj_std), bv=Parameter(np.zeros(d)),
            wo=normal((d, d), proj_std), bo=Parameter(np.zeros(d)),
            ln1_gamma=Parameter(np.ones(d)), ln1_beta=Parameter(np.zeros(d)),
            w1=normal((d, ffn), proj_std), b1=Parameter(np.zeros(ffn)),
            w2=normal((ffn, d), 1.0 / np.sqrt(ffn)), b2=Parameter(np.zeros(d)),
            ln2_gamma=Parameter(np.ones(d)), ln2_beta=Parameter(np.zeros(d)),
        ))
    return EncoderState(config=config, token_embeddings=tok, positional=pos, layers=layers)


def _attention(h: Tensor, layer: LayerWeights, allowed: np.ndarray, cfg: EncoderConfig) -> Tensor:
    q = T.add(T.matmul(h, layer.wq.value), layer.bq.value)
    k = T.add(T.matmul(h, layer.wk.value), layer.bk.value)
    v = T.add(T.matmul(h, layer.wv.value), layer.bv.value)
    head_outs = []
    inv_sqrt = 1.0 / np.sqrt(cfg.head_dim)
    for i in range(cfg.heads):
        lo, hi = i * cfg.head_dim, (i + 1) * cfg.head_dim
        qh = T.slice_cols(q, lo, hi)
        kh = T.slice_cols(k, lo, hi)
        vh = T.slice_cols(v, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose_last(kh)), inv_sqrt)
        weights = T.masked_softmax_rows(scores, allowed)
        head_outs.append(T.matmul(weights, vh))
    return T.add(T.matmul(T.concat_cols(head_outs), layer.wo.value), layer.bo.value)


def encode(state: EncoderState, x: Tensor, attention_mask, pos_offset: int = 0) -> Tensor:
    """Run the transformer stack over rows already in embedding space.

    `attention_mask` marks real rows with True; PAD rows neither attend nor
    are attended to, so changing a PAD row's embedding cannot perturb any
    real row's output. Accepts a single (rows x d) sequence or a batch
    (batch x rows x d) with a per-example mask. `pos_offset` shifts which
    positional rows are added (pre-training uses it to cover the whole
    positional table).
    """
    cfg = state.config
    rows = x.shape[-2]
    if rows + pos_offset > cfg.max_rows:
        raise CapacityError(f"sequence of {rows} rows at offset {pos_offset} exceeds "
                            f"positional capacity {cfg.max_rows}")
    if x.shape[-1] != cfg.d:
        raise DimensionError(f"input width {x.shape[-1]} does not match encoder dim {cfg.d}")
    mask = np.asarray(attention_mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise DimensionError(f"mask shape {mask.shape} does not match rows of {x.shape}")

    # masked positions are excluded both as queries and as keys
    allowed = mask[..., :, None] & mask[..., None, :]

    h = T.add(x, T.slice_rows(state.positional.value, pos_offset, pos_offset + rows))
    for layer in state.layers:
        h = T.layer_norm(T.add(h, _attention(h, layer, allowed, cfg)),
                         layer.ln1_gamma.value, layer.ln1_beta.value)
        ffn = T.add(T.matmul(T.gelu(T.add(T.matmul(h, layer.w1.value), layer.b1.value)),
                             layer.w2.value), layer.b2.value)
        h = T.layer_norm(T.add(h, ffn), layer.ln2_gamma.value, layer.ln2_beta.value)
    return h


def pool(h: Tensor, article_span: slice, attention_mask) -> Tensor:
    """Mean of hidden rows over the non-PAD article positions only."""
    start, stop = article_span.start or 0, article_span.stop
    if stop is None or stop > h.shape[-2] or start < 0 or start >= stop:
        raise ContractError(f"article span {article_span} outside {h.shape[-2]} rows")
    mask = np.asarray(attention_mask, dtype=bool)[..., start:stop]
    return T.masked_mean_rows(T.slice_rows(h, start, stop), mask)


def freeze(state: EncoderState) -> EncoderState:
    """Mark every parameter non-trainable; idempotent."""
    for p in state.parameters():
        p.trainable = False
    state.frozen = True
    return state


def clone_encoder(state: EncoderState, trainable: bool) -> EncoderState:
    """Deep-copy the weights into a fresh state (used by full fine-tuning)."""
    tok = Parameter(state.token_embeddings.data.copy(), trainable)
    pos = Parameter(state.positional.data.copy(), trainable)
    layers = []
    for lw in state.layers:
        layers.append(LayerWeights(*[Parameter(p.data.copy(), trainable) for p in lw.parameters()]))
    return EncoderState(config=state.config, token_embeddings=tok, positional=pos,
                        layers=layers, frozen=not trainable)


# ---------------------------------------------------------------------------
# masked-token pre-training

MASK_ID = 1


def pretrain_backbone(state: EncoderState, sequences: Sequence[Sequence[int]], steps: int,
                      mask_prob: float = 0.15, lr: float = 1e-3, batch_size: int = 16,
                      seed: int = 0) -> tuple[EncoderState, list[float]]:
    """Masked-token prediction over raw token-id sequences.

    Each step samples a batch, masks `mask_prob` of the real positions, and
    trains the whole encoder to recover the original ids (logits are tied to
    the token-embedding table). Batches land at a random positional offset so
    every row of the positional table is trained, not just the first n_max;
    composed prompt+article inputs later occupy those higher rows. Returns
    the state and the per-step losses.
    """
    if state.frozen:
        raise ContractError("pretrain_backbone: encoder is frozen")
    if steps <= 0:
        return state, []
    cfg = state.config
    rng = np.random.default_rng(seed)
    ids = np.zeros((len(sequences), cfg.n_max), dtype=np.int64)
    for i, seq in enumerate(sequences):
        trunc = list(seq)[:cfg.n_max]
        ids[i, :len(trunc)] = trunc

    params = state.parameters()
    opt = T.Adam(params, lr=lr)
    losses: list[float] = []
    for _ in range(steps):
        batch = ids[rng.integers(0, len(ids), size=min(batch_size, len(ids)))]
        real = batch != 0
        masked = real & (rng.random(batch.shape) < mask_prob)
        inputs = np.where(masked, MASK_ID, batch)
        offset = int(rng.integers(0, cfg.prompt_capacity + 1))

        x = T.embedding(state.token_embeddings.value, inputs)
        h = encode(state, x, real, pos_offset=offset)
        flat = T.reshape(h, (batch.size, cfg.d))
        sel = np.flatnonzero(masked.reshape(-1))
        if sel.size == 0:
            losses.append(0.0)
            continue
        picked = T.embedding(flat, sel)  # hidden rows at the masked slots
        logits = T.matmul(picked, T.transpose_last(state.token_embeddings.value))
        loss = T.softmax_cross_entropy(logits, batch.reshape(-1)[sel])
        T.backward(loss)
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())
    return state, losses


# ---------------------------------------------------------------------------
# serialization: magic, version, JSON config header, raw little-endian floats

def save_encoder(state: EncoderState, path: str) -> None:
    header = json.dumps({
        "d": state.config.d, "layers": state.config.layers, "heads": state.config.heads,
        "ffn_dim": state.config.ffn_dim, "vocab_size": state.config.vocab_size,
        "n_max": state.config.n_max, "prompt_capacity": state.config.prompt_capacity,
        "seed": state.config.seed, "frozen": state.frozen,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        f.write(header)
        for p in state.parameters():
            f.write(p.data.astype("<f8").tobytes())


def load_encoder(path: str) -> EncoderState:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ConfigError(f"{path}: not an encoder weights file")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported format version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        frozen = header.pop("frozen")
        config = EncoderConfig(**header)
        state = init_encoder(config)
        for p in state.parameters():
            raw = f.read(p.data.size * 8)
            p.value.data = np.frombuffer(raw, dtype="<f8").reshape(p.shape).astype(np.float64)
            p.value.grad = np.zeros_like(p.value.data)
    if frozen:
        freeze(state)
    return state
