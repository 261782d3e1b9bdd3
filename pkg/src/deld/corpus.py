"""Synthetic multi-generator news corpora, ingestion, tokenization, splits.

Synthetic articles are plain token sequences, not fluent prose: each
generator has its own style vocabulary, and label evidence is injected
through marker tokens whose label correlation is configurable per generator.
Flipping a shared marker's correlation sign between generators creates the
inter-task conflict that forces forgetting pressure on sequential
fine-tuning.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, ParseError, ValidationError

PAD_ID, MASK_ID, UNK_ID = 0, 1, 2
_RESERVED = (("<pad>", PAD_ID), ("<mask>", MASK_ID), ("<unk>", UNK_ID))

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class NewsExample:
    text: str
    label: int  # 0 = true news, 1 = disinformation
    generator: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label!r}")
        if not self.text:
            raise ValidationError("text must be nonempty")


@dataclass
class GeneratorDataset:
    generator_id: str
    examples: list[NewsExample]

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.int64)


# ---------------------------------------------------------------------------
# synthetic generation

@dataclass(frozen=True)
class MarkerSpec:
    """A pair of opposite-label tell tokens and how reliably they track labels.

    correlation +1 means a disinformation example carries `fake_token`
    (and a true example `true_token`) every time the marker fires;
    -1 reverses the pairing; 0 decouples markers from labels entirely.
    """
    true_token: str
    fake_token: str
    correlation: float = 1.0
    rate: float = 1.0      # probability the marker fires in an example
    repeats: int = 1       # occurrences inserted when it fires

    def __post_init__(self):
        if not -1.0 <= self.correlation <= 1.0:
            raise ConfigError(f"marker correlation {self.correlation} outside [-1, 1]")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"marker rate {self.rate} outside [0, 1]")


@dataclass(frozen=True)
class GeneratorSpec:
    generator_id: str
    true_count: int
    fake_count: int
    style_tokens: tuple[str, ...]
    markers: tuple[MarkerSpec, ...]
    style_rate: float = 0.6  # remaining body tokens come from the common pool
    min_len: int = 14
    max_len: int = 30

    def __post_init__(self):
        if self.true_count < 10 or self.fake_count < 10:
            raise ConfigError(
                f"{self.generator_id}: per-class counts must be >= 10, "
                f"got {self.true_count}/{self.fake_count}")
        if self.min_len < 4 or self.max_len < self.min_len:
            raise ConfigError(f"{self.generator_id}: bad length range {self.min_len}..{self.max_len}")


@dataclass(frozen=True)
class SynthSpec:
    generators: tuple[GeneratorSpec, ...]
    common_tokens: tuple[str, ...]
    seed: int = 0

    def __post_init__(self):
        if not self.generators:
            raise ConfigError("spec has no generators")
        ids = [g.generator_id for g in self.generators]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate generator ids: {ids}")
        if len(self.common_tokens) < 4:
            raise ConfigError("common token pool too small")


_SYLLABLES = ["ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu",
              "na", "pe", "qi", "ro", "su", "ta", "ve", "wi", "xo", "zu"]


def _coin_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    """Deterministic pronounceable nonsense words, unique across the corpus."""
    words = []
    while len(words) < count:
        w = "".join(rng.choice(_SYLLABLES) for _ in range(3))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def synth_generate(spec: SynthSpec) -> list[GeneratorDataset]:
    """Materialize the corpus described by `spec`, deterministically in its seed."""
    rng = np.random.default_rng(spec.seed)
    datasets = []
    for gen in spec.generators:
        examples = []
        for label, count in ((0, gen.true_count), (1, gen.fake_count)):
            for _ in range(count):
                length = int(rng.integers(gen.min_len, gen.max_len + 1))
                body = []
                for _ in range(length):
                    pool = gen.style_tokens if rng.random() < gen.style_rate else spec.common_tokens
                    body.append(pool[rng.integers(0, len(pool))])
                for marker in gen.markers:
                    if rng.random() >= marker.rate:
                        continue
                    match = rng.random() < (1.0 + marker.correlation) / 2.0
                    tell = (marker.fake_token if label == 1 else marker.true_token)
                    if not match:
                        tell = (marker.true_token if label == 1 else marker.fake_token)
                    for _ in range(marker.repeats):
                        body.insert(int(rng.integers(0, len(body) + 1)), tell)
                examples.append(NewsExample(" ".join(body), label, gen.generator_id))
        order = rng.permutation(len(examples))
        datasets.append(GeneratorDataset(gen.generator_id, [examples[i] for i in order]))
    return datasets


TABLE_COUNTS = {"human": (2500, 2500), "vicuna": (500, 326),
                "llama": (501, 557), "chatgpt": (501, 587)}
GENERATOR_ORDER = ("human", "vicuna", "llama", "chatgpt")


def conflict_spec(seed: int = 0, counts: dict[str, tuple[int, int]] | None = None,
                  conflict_rate: float = 1.0, style_tokens_per_gen: int = 30,
                  common_pool: int = 80) -> SynthSpec:
    """The calibrated 4-generator suite with contradictory shared markers.

    Every generator carries (a) a private tell pair that is perfectly
    predictive within its own dataset, (b) a shared credibility pair whose
    polarity agrees everywhere, and (c) a shared conflict pair whose polarity
    flips between the first two and last two generators. Sequential full
    fine-tuning inverts the conflict pair and drifts everything else, while
    frozen-backbone prompt tuning only ever risks the conflict channel.
    """
    counts = dict(TABLE_COUNTS if counts is None else counts)
    naming = np.random.default_rng(12345)  # fixed: token identities are part of the suite
    taken: set[str] = set()
    common = _coin_words(naming, common_pool, taken)
    credibility = _coin_words(naming, 2, taken)
    conflict = _coin_words(naming, 2, taken)
    style = {g: _coin_words(naming, style_tokens_per_gen, taken) for g in GENERATOR_ORDER}
    private = {g: _coin_words(naming, 2, taken) for g in GENERATOR_ORDER}

    generators = []
    for idx, gen_id in enumerate(GENERATOR_ORDER):
        if gen_id not in counts:
            raise ConfigError(f"counts missing generator {gen_id!r}")
        true_count, fake_count = counts[gen_id]
        polarity = 1.0 if idx < 2 else -1.0
        generators.append(GeneratorSpec(
            generator_id=gen_id,
            true_count=true_count,
            fake_count=fake_count,
            style_tokens=tuple(style[gen_id]),
            markers=(
                MarkerSpec(private[gen_id][0], private[gen_id][1], correlation=1.0, repeats=2),
                MarkerSpec(credibility[0], credibility[1], correlation=0.9, rate=0.8),
                MarkerSpec(conflict[0], conflict[1], correlation=polarity, rate=conflict_rate),
            ),
        ))
    return SynthSpec(generators=tuple(generators), common_tokens=tuple(common), seed=seed)


def chance_spec(seed: int = 0, per_class: int = 60) -> SynthSpec:
    """Same layout as the conflict suite but every marker correlation is zero."""
    base = conflict_spec(seed=seed, counts={g: (per_class, per_class) for g in GENERATOR_ORDER})
    generators = tuple(
        replace(g, markers=tuple(replace(m, correlation=0.0) for m in g.markers))
        for g in base.generators)
    return SynthSpec(generators=generators, common_tokens=base.common_tokens, seed=seed)


# ---------------------------------------------------------------------------
# vocabulary and tokenization

class Vocabulary:
    """Dense token-to-id map with PAD=0, MASK=1, UNK=2 reserved."""

    def __init__(self, tokens: list[str]):
        self.token_to_id: dict[str, int] = {tok: i for tok, i in _RESERVED}
        for tok in tokens:
            if tok not in self.token_to_id:
                self.token_to_id[tok] = len(self.token_to_id)
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok, idx in sorted(self.token_to_id.items(), key=lambda kv: kv[1]):
                f.write(f"{tok}\t{idx}\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        pairs = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise ParseError(f"{path}: line {lineno}: expected token<TAB>id")
                pairs.append((parts[0], int(parts[1])))
        pairs.sort(key=lambda kv: kv[1])
        vocab = cls.__new__(cls)
        vocab.token_to_id = {tok: idx for tok, idx in pairs}
        vocab.id_to_token = {idx: tok for tok, idx in pairs}
        return vocab


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def build_vocab(datasets: list[GeneratorDataset], max_size: int = 2000) -> Vocabulary:
    """Most frequent corpus tokens, capped at max_size including the reserved ids."""
    counts: Counter[str] = Counter()
    for ds in datasets:
        for ex in ds.examples:
            counts.update(words(ex.text))
    keep = [tok for tok, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]
    return Vocabulary(keep[: max_size - len(_RESERVED)])


def tokenize(text: str, vocab: Vocabulary, n_max: int) -> list[int]:
    """Lowercased word-level ids, truncated to n_max and PAD-padded to n_max."""
    ids = [vocab.lookup(w) for w in words(text)][:n_max]
    return ids + [PAD_ID] * (n_max - len(ids))


def encode_dataset(ds: GeneratorDataset, vocab: Vocabulary, n_max: int) -> np.ndarray:
    return np.array([tokenize(ex.text, vocab, n_max) for ex in ds.examples], dtype=np.int64)


# ---------------------------------------------------------------------------
# train/test splitting

def split_80_20(dataset: GeneratorDataset, repeat_index: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified 80/20 split, deterministic in (seed, repeat_index)."""
    n = len(dataset)
    if n < 5:
        raise ContractError(f"dataset {dataset.generator_id!r} too small to split: {n} examples")
    labels = dataset.labels
    rng = np.random.default_rng([seed, repeat_index])
    want_train = round(0.8 * n)

    train_parts, test_parts = [], []
    per_class = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        per_class.append(rng.permutation(idx))
    takes = [round(0.8 * len(p)) for p in per_class]
    # per-class rounding can drift from the overall 80% target by one; repair
    while sum(takes) > want_train:
        takes[int(np.argmax(takes))] -= 1
    while sum(takes) < want_train:
        takes[int(np.argmin(takes))] += 1
    for perm, take in zip(per_class, takes):
        train_parts.append(perm[:take])
        test_parts.append(perm[take:])
    train = np.sort(np.concatenate(train_parts))
    test = np.sort(np.concatenate(test_parts))
    return train, test


# ---------------------------------------------------------------------------
# JSONL ingestion

def load_jsonl(path: str) -> list[GeneratorDataset]:
    """One JSON object per line with keys text/label/generator, grouped by generator."""
    grouped: dict[str, list[NewsExample]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc.msg}") from exc
            if not isinstance(obj, dict) or not {"text", "label", "generator"} <= obj.keys():
                raise ParseError(f"{path}: line {lineno}: need keys text, label, generator")
            label = obj["label"]
            if label not in (0, 1):
                raise ValidationError(f"{path}: line {lineno}: label must be 0 or 1, got {label!r}")
            text = obj["text"]
            if not isinstance(text, str) or not text:
                raise ValidationError(f"{path}: line {lineno}: text must be a nonempty string")
            ex = NewsExample(text=text, label=int(label), generator=str(obj["generator"]))
            grouped.setdefault(ex.generator, []).append(ex)
    return [GeneratorDataset(gen, examples) for gen, examples in grouped.items()]


def save_jsonl(datasets: list[GeneratorDataset], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ds in datasets:
            for ex in ds.examples:
                f.write(json.dumps({"text": ex.text, "label": ex.label,
                                    "generator": ex.generator}, sort_keys=True) + "\n")
