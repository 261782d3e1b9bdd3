"""Sequential prompt tuning over a frozen backbone, plus fine-tuning baselines.

The prompt-tuning pipeline runs two phases per generator: train a fresh soft
prompt jointly with the classifier on that generator's data, freeze the
prompt, then re-tune the classifier alone. The baselines fine-tune an
unfrozen clone of the backbone on all data at once, per dataset, or
sequentially. Evaluation never sees the generator identity of a test
example: one composed bank serves every test article.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .corpus import PAD_ID, GeneratorDataset, Vocabulary, encode_dataset, split_80_20
from .encoder import EncoderState, clone_encoder, encode, pool
from .errors import ConfigError, ContractError, DimensionError
from .metrics import AccuracyMatrix, accuracy
from .prompts import PromptBank, compose_input, freeze_prompt, init_prompt
from .seeding import derive_seed
from .tensor import Parameter, Tensor

PROMPT_LENGTHS = (4, 8, 12, 16, 20)
PROB_CLAMP = 1e-12
EVAL_BATCH = 128


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 16
    prompt_len: int = 12
    position_mode: str = "prepend"
    seed: int = 0
    allow_custom_prompt_len: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.prompt_len not in PROMPT_LENGTHS and not self.allow_custom_prompt_len:
            raise ConfigError(f"prompt_len {self.prompt_len} not in {PROMPT_LENGTHS}; "
                              "set allow_custom_prompt_len to override")
        if self.position_mode not in ("prepend", "append"):
            raise ConfigError(f"unknown position_mode {self.position_mode!r}")

    def to_dict(self) -> dict:
        return {"lr": self.lr, "epochs": self.epochs, "batch_size": self.batch_size,
                "prompt_len": self.prompt_len, "position_mode": self.position_mode,
                "seed": self.seed}


@dataclass
class Classifier:
    weights: Parameter  # (1 x d)
    bias: Parameter     # (1,)

    @classmethod
    def new(cls, d: int) -> "Classifier":
        return cls(weights=Parameter(np.zeros((1, d))), bias=Parameter(np.zeros(1)))

    def parameters(self) -> list[Parameter]:
        return [self.weights, self.bias]

    def snapshot(self) -> bytes:
        return self.weights.data.tobytes() + self.bias.data.tobytes()


@dataclass
class ModelState:
    encoder: EncoderState
    bank: PromptBank
    classifier: Classifier

    def snapshot(self) -> dict[str, bytes]:
        snap = {"encoder": self.encoder.state_bytes(), "classifier": self.classifier.snapshot()}
        for p in self.bank.prompts:
            snap[f"prompt:{p.generator_id}"] = p.snapshot()
        return snap


@dataclass
class TaskData:
    """One generator's tokenized train/test split."""
    generator_id: str
    train_ids: np.ndarray
    train_labels: np.ndarray
    test_ids: np.ndarray
    test_labels: np.ndarray


def prepare_tasks(datasets: list[GeneratorDataset], vocab: Vocabulary, n_max: int,
                  repeat_index: int, seed: int) -> list[TaskData]:
    """Tokenize and split every dataset; splits are stratified and seeded."""
    tasks = []
    for ds in datasets:
        ids = encode_dataset(ds, vocab, n_max)
        labels = ds.labels
        train, test = split_80_20(ds, repeat_index, derive_seed(seed, ds.generator_id))
        tasks.append(TaskData(ds.generator_id, ids[train], labels[train], ids[test], labels[test]))
    return tasks


# ---------------------------------------------------------------------------
# classifier head and loss

def classify(pooled: Tensor, clf: Classifier) -> Tensor:
    """Sigmoid of the affine map; accepts (d,) or (batch x d) pooled features."""
    d = clf.weights.shape[1]
    if pooled.shape[-1] != d:
        raise DimensionError(f"pooled width {pooled.shape[-1]} does not match classifier dim {d}")
    single = pooled.ndim == 1
    feats = T.reshape(pooled, (1, d)) if single else pooled
    logits = T.add(T.matmul(feats, T.transpose_last(clf.weights.value)), clf.bias.value)
    probs = T.sigmoid(T.reshape(logits, (feats.shape[0],)))
    return T.reshape(probs, ()) if single else probs


def bce_loss(y_hat: Tensor, y) -> Tensor:
    """Binary cross-entropy, clamped away from 0/1, averaged over the batch."""
    y = np.asarray(y, dtype=np.float64)
    p = T.clamp(y_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    target = Tensor(np.broadcast_to(y, p.shape).copy())
    flipped = Tensor(1.0 - np.broadcast_to(y, p.shape))
    losses = T.add(T.mul(target, T.log(p)),
                   T.mul(flipped, T.log(T.add(T.scale(p, -1.0), Tensor(np.ones(p.shape))))))
    return T.scale(T.mean_all(losses), -1.0)


# ---------------------------------------------------------------------------
# forward pass

def _trim(ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop trailing all-PAD columns; exact thanks to the attention mask."""
    mask = ids != PAD_ID
    keep = int(mask.any(axis=0).nonzero()[0].max()) + 1 if mask.any() else 1
    return ids[:, :keep], mask[:, :keep]


def forward_probs(model: ModelState, ids: np.ndarray) -> Tensor:
    """Token ids (batch x n) through embed, compose, encode, pool, classify."""
    ids, mask = _trim(ids)
    x = T.embedding(model.encoder.token_embeddings.value, ids)
    composed, span, full_mask = compose_input(model.bank, x, mask)
    h = encode(model.encoder, composed, full_mask)
    pooled = pool(h, span, full_mask)
    return classify(pooled, model.classifier)


def predict(model: ModelState, ids: np.ndarray) -> np.ndarray:
    """Hard 0/1 predictions; the 0.5 tie goes to the positive class."""
    preds = []
    with T.no_grad():
        for lo in range(0, len(ids), EVAL_BATCH):
            probs = forward_probs(model, ids[lo:lo + EVAL_BATCH])
            preds.append(probs.data >= 0.5)
    return np.concatenate(preds).astype(np.int64)


def evaluate(model: ModelState, task: TaskData) -> float:
    return accuracy(predict(model, task.test_ids), task.test_labels)


def _run_epochs(model: ModelState, params: list[Parameter], ids: np.ndarray,
                labels: np.ndarray, cfg: TrainConfig, seed: int) -> list[float]:
    """Minibatch Adam over the given parameter set; returns per-epoch mean loss."""
    opt = T.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(seed)
    epoch_losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(ids))
        total, count = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            probs = forward_probs(model, ids[batch])
            loss = bce_loss(probs, labels[batch])
            T.backward(loss)
            opt.step()
            opt.zero_grad()
            total += loss.item() * len(batch)
            count += len(batch)
        epoch_losses.append(total / count)
    return epoch_losses


# ---------------------------------------------------------------------------
# the two prompt-tuning phases

def train_prompt_for_task(model: ModelState, task: TaskData, cfg: TrainConfig) -> list[float]:
    """Phase one: fit the newest prompt jointly with the classifier on one task."""
    if not model.encoder.frozen:
        raise ContractError("prompt training requires a frozen encoder")
    if not model.bank.prompts:
        raise ContractError("no prompt in the bank; append one for this task first")
    for p in model.bank.prompts[:-1]:
        if not p.frozen:
            raise ContractError(f"earlier prompt {p.generator_id!r} is not frozen")
    newest = model.bank.prompts[-1]
    if newest.frozen:
        raise ContractError(f"prompt {newest.generator_id!r} is already frozen")
    params = [newest.matrix] + model.classifier.parameters()
    return _run_epochs(model, params, task.train_ids, task.train_labels, cfg,
                       derive_seed(cfg.seed, "prompt-phase", task.generator_id))


def finetune_classifier(model: ModelState, task: TaskData, cfg: TrainConfig) -> list[float]:
    """Phase two: classifier-only tuning with every prompt frozen."""
    if not model.encoder.frozen:
        raise ContractError("classifier tuning requires a frozen encoder")
    for p in model.bank.prompts:
        if not p.frozen:
            raise ContractError(f"prompt {p.generator_id!r} must be frozen before classifier tuning")
    return _run_epochs(model, model.classifier.parameters(), task.train_ids, task.train_labels,
                       cfg, derive_seed(cfg.seed, "clf-phase", task.generator_id))


# ---------------------------------------------------------------------------
# experiment regimes

def run_deld_seq(encoder: EncoderState, tasks: list[TaskData],
                 cfg: TrainConfig) -> tuple[ModelState, AccuracyMatrix]:
    """Sequential prompt tuning: one prompt per generator, oldest prompts frozen.

    After each stage the full current bank is evaluated on every generator
    seen so far, filling the accuracy matrix wedge.
    """
    if not tasks:
        raise ContractError("need at least one task")
    if not encoder.frozen:
        raise ContractError("the shared backbone must be frozen before prompt tuning")
    model = ModelState(encoder=encoder, bank=PromptBank(position_mode=cfg.position_mode),
                       classifier=Classifier.new(encoder.config.d))
    matrix = AccuracyMatrix([t.generator_id for t in tasks])
    for k, task in enumerate(tasks):
        model.bank.add(init_prompt(task.generator_id, cfg.prompt_len, encoder,
                                   derive_seed(cfg.seed, "prompt-init", k)))
        train_prompt_for_task(model, task, cfg)
        freeze_prompt(model.bank, task.generator_id)
        finetune_classifier(model, task, cfg)
        for i in range(k + 1):
            matrix.set(i, k, evaluate(model, tasks[i]))
    return model, matrix


def run_ft_seq(encoder: EncoderState, tasks: list[TaskData],
               cfg: TrainConfig) -> tuple[ModelState, AccuracyMatrix]:
    """Full fine-tuning on each dataset in turn (no prompts, unfrozen clone)."""
    if not tasks:
        raise ContractError("need at least one task")
    model = ModelState(encoder=clone_encoder(encoder, trainable=True), bank=PromptBank(),
                       classifier=Classifier.new(encoder.config.d))
    params = model.encoder.parameters() + model.classifier.parameters()
    matrix = AccuracyMatrix([t.generator_id for t in tasks])
    for k, task in enumerate(tasks):
        # same stage tag as run_ft_per, so a one-dataset sequence reduces to it
        _run_epochs(model, params, task.train_ids, task.train_labels, cfg,
                    derive_seed(cfg.seed, "ft-stage", k))
        for i in range(k + 1):
            matrix.set(i, k, evaluate(model, tasks[i]))
    return model, matrix


def _pooled_task(tasks: list[TaskData]) -> TaskData:
    return TaskData(
        generator_id="pooled",
        train_ids=np.concatenate([t.train_ids for t in tasks]),
        train_labels=np.concatenate([t.train_labels for t in tasks]),
        test_ids=np.concatenate([t.test_ids for t in tasks]),
        test_labels=np.concatenate([t.test_labels for t in tasks]),
    )


def run_ft_all(encoder: EncoderState, tasks: list[TaskData], cfg: TrainConfig,
               with_deld: bool = False) -> tuple[ModelState, dict[str, float]]:
    """One model on the union of all training splits.

    with_deld trains a single prompt plus classifier over the frozen backbone
    instead of fine-tuning an unfrozen clone.
    """
    if not tasks:
        raise ContractError("need at least one task")
    pooled = _pooled_task(tasks)
    if with_deld:
        if not encoder.frozen:
            raise ContractError("the shared backbone must be frozen before prompt tuning")
        model = ModelState(encoder=encoder, bank=PromptBank(position_mode=cfg.position_mode),
                           classifier=Classifier.new(encoder.config.d))
        model.bank.add(init_prompt("pooled", cfg.prompt_len, encoder,
                                   derive_seed(cfg.seed, "prompt-init", 0)))
        train_prompt_for_task(model, pooled, cfg)
        freeze_prompt(model.bank, "pooled")
        finetune_classifier(model, pooled, cfg)
    else:
        model = ModelState(encoder=clone_encoder(encoder, trainable=True), bank=PromptBank(),
                           classifier=Classifier.new(encoder.config.d))
        params = model.encoder.parameters() + model.classifier.parameters()
        _run_epochs(model, params, pooled.train_ids, pooled.train_labels, cfg,
                    derive_seed(cfg.seed, "ft-all", 0))
    accs = {t.generator_id: evaluate(model, t) for t in tasks}
    return model, accs


def run_ft_per(encoder: EncoderState, tasks: list[TaskData], cfg: TrainConfig,
               with_deld: bool = False) -> tuple[dict[str, ModelState], dict[str, float]]:
    """An independent model per dataset, each evaluated on its own test split."""
    if not tasks:
        raise ContractError("need at least one task")
    models: dict[str, ModelState] = {}
    accs: dict[str, float] = {}
    for k, task in enumerate(tasks):
        if with_deld:
            if not encoder.frozen:
                raise ContractError("the shared backbone must be frozen before prompt tuning")
            model = ModelState(encoder=encoder, bank=PromptBank(position_mode=cfg.position_mode),
                               classifier=Classifier.new(encoder.config.d))
            model.bank.add(init_prompt(task.generator_id, cfg.prompt_len, encoder,
                                       derive_seed(cfg.seed, "prompt-init", k)))
            train_prompt_for_task(model, task, cfg)
            freeze_prompt(model.bank, task.generator_id)
            finetune_classifier(model, task, cfg)
        else:
            model = ModelState(encoder=clone_encoder(encoder, trainable=True), bank=PromptBank(),
                               classifier=Classifier.new(encoder.config.d))
            params = model.encoder.parameters() + model.classifier.parameters()
            _run_epochs(model, params, task.train_ids, task.train_labels, cfg,
                        derive_seed(cfg.seed, "ft-stage", k))
        models[task.generator_id] = model
        accs[task.generator_id] = evaluate(model, task)
    return models, accs
