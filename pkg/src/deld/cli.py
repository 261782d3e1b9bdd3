"""Command-line orchestration: corpus synthesis, pre-training, experiment
regimes, ablations, training-order sweeps, zero-shot evaluation, and the
forward-pass benchmark. Every subcommand writes its JSON report (and a
human-readable table) atomically into the output directory."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import corpus as corpus_mod
from . import tensor as T
from .corpus import (GENERATOR_ORDER, GeneratorDataset, Vocabulary, build_vocab, chance_spec,
                     conflict_spec, load_jsonl, save_jsonl, synth_generate, tokenize)
from .encoder import EncoderConfig, EncoderState, encode, freeze, init_encoder, load_encoder, \
    pretrain_backbone, save_encoder
from .errors import CapacityError, ConfigError, ContractError, DeldError
from .metrics import (AccuracyMatrix, ExperimentReport, ablate_prompts, forgetting,
                      order_robustness, per_dataset_forgetting)
from .prompts import PromptBank
from .reports import (atomic_write_json, atomic_write_text, forgetting_csv, render_grid_table,
                      render_matrix_table, render_orders_table, render_report_table, timings_csv)
from .seeding import derive_seed
from .training import (PROMPT_LENGTHS, TrainConfig, prepare_tasks, run_deld_seq, run_ft_all,
                       run_ft_per, run_ft_seq)
from .zero_shot import ZeroShotConfig, evaluate_zero_shot

# the four training orders used by the order-robustness sweep
CANONICAL_ORDERS = (
    ("human", "vicuna", "llama", "chatgpt"),
    ("vicuna", "human", "chatgpt", "llama"),
    ("llama", "chatgpt", "human", "vicuna"),
    ("chatgpt", "llama", "vicuna", "human"),
)

REGIMES = ("deld-seq", "ft-seq", "ft-all", "ft-per", "zero-shot")


# ---------------------------------------------------------------------------
# configuration

@dataclass
class RunConfig:
    regime: str = "deld-seq"
    with_deld: bool = False
    seed: int = 0
    repeats: int = 1
    order: list[str] | None = None
    preset: str = "conflict"
    data_path: str | None = None
    counts: dict[str, list[int]] | None = None
    conflict_rate: float = 0.5
    encoder: dict | None = None
    train: dict | None = None
    pretrain_steps: int = 600
    pretrain_lr: float = 3e-4
    mask_prob: float = 0.15
    encoder_path: str | None = None
    vocab_path: str | None = None
    endpoint: str | None = None
    model: str = "local-mock"
    api_key_env: str = ""

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        fields = {"d": 64, "layers": 4, "heads": 4, "ffn_dim": 128, "n_max": 36,
                  "prompt_capacity": 160, "seed": self.seed}
        fields.update(self.encoder or {})
        return EncoderConfig(vocab_size=vocab_size, **fields)

    def train_config(self) -> TrainConfig:
        fields = {"lr": 1e-3, "epochs": 10, "batch_size": 16, "prompt_len": 12,
                  "position_mode": "prepend", "seed": self.seed}
        fields.update(self.train or {})
        return TrainConfig(**fields)

    def echo(self) -> dict:
        """Fully resolved config for the report; excludes the output location."""
        return {
            "regime": self.regime, "with_deld": self.with_deld, "seed": self.seed,
            "repeats": self.repeats, "order": self.order, "preset": self.preset,
            "data_path": self.data_path, "counts": self.counts,
            "conflict_rate": self.conflict_rate,
            "encoder": self.encoder or {}, "train": self.train or {},
            "pretrain_steps": self.pretrain_steps, "pretrain_lr": self.pretrain_lr,
            "mask_prob": self.mask_prob, "encoder_path": self.encoder_path,
            "vocab_path": self.vocab_path, "endpoint": self.endpoint, "model": self.model,
        }


def load_run_config(args: argparse.Namespace) -> RunConfig:
    payload: dict = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            payload = json.load(f)
    cfg = RunConfig(**payload)
    overrides = {
        "regime": getattr(args, "regime", None),
        "seed": getattr(args, "seed", None),
        "repeats": getattr(args, "repeats", None),
        "data_path": getattr(args, "data", None),
        "preset": getattr(args, "preset", None),
        "encoder_path": getattr(args, "encoder", None),
        "vocab_path": getattr(args, "vocab", None),
        "endpoint": getattr(args, "endpoint", None),
        "model": getattr(args, "model", None),
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "with_deld", False):
        cfg.with_deld = True
    if getattr(args, "order", None):
        cfg.order = [s.strip() for s in args.order.split(",")]
    train = dict(cfg.train or {})
    if getattr(args, "prompt_len", None) is not None:
        train["prompt_len"] = args.prompt_len
    if getattr(args, "position", None) is not None:
        train["position_mode"] = args.position
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = args.epochs
    cfg.train = train
    return cfg


# ---------------------------------------------------------------------------
# shared pipeline pieces

def _load_datasets(cfg: RunConfig) -> list[GeneratorDataset]:
    if cfg.data_path:
        return load_jsonl(cfg.data_path)
    counts = None
    if cfg.counts:
        counts = {k: tuple(v) for k, v in cfg.counts.items()}
    if cfg.preset == "conflict":
        spec = conflict_spec(seed=cfg.seed, counts=counts, conflict_rate=cfg.conflict_rate)
    elif cfg.preset == "chance":
        spec = chance_spec(seed=cfg.seed)
    else:
        raise ConfigError(f"unknown preset {cfg.preset!r}")
    return synth_generate(spec)


def _order_datasets(datasets: list[GeneratorDataset], order: list[str] | None) -> list[GeneratorDataset]:
    if order is None:
        return datasets
    by_id = {ds.generator_id: ds for ds in datasets}
    if sorted(order) != sorted(by_id):
        raise ConfigError(f"order {order} is not a permutation of dataset ids {sorted(by_id)}")
    return [by_id[g] for g in order]


def _backbone(cfg: RunConfig, datasets: list[GeneratorDataset]) -> tuple[EncoderState, Vocabulary]:
    """Load the shared frozen backbone, or pre-train one from the corpus."""
    if cfg.encoder_path:
        state = load_encoder(cfg.encoder_path)
        if cfg.vocab_path is None:
            raise ConfigError("--vocab is required when loading encoder weights")
        vocab = Vocabulary.load(cfg.vocab_path)
        if not state.frozen:
            freeze(state)
        return state, vocab
    vocab = build_vocab(datasets)
    state = init_encoder(cfg.encoder_config(vocab.size))
    sequences = [tokenize(ex.text, vocab, state.config.n_max)
                 for ds in datasets for ex in ds.examples]
    pretrain_backbone(state, sequences, steps=cfg.pretrain_steps, mask_prob=cfg.mask_prob,
                      lr=cfg.pretrain_lr, seed=derive_seed(cfg.seed, "pretrain"))
    freeze(state)
    return state, vocab


def _average_matrices(matrices: list[AccuracyMatrix]) -> AccuracyMatrix:
    if len(matrices) == 1:
        return matrices[0]
    merged = AccuracyMatrix(matrices[0].dataset_ids)
    for key in matrices[0].cells:
        merged.set(*key, float(np.mean([m.cells[key] for m in matrices])))
    return merged


def run_experiment(cfg: RunConfig, encoder: EncoderState, vocab: Vocabulary,
                   datasets: list[GeneratorDataset]) -> ExperimentReport:
    """Execute one regime over `repeats` train/test splits and average."""
    start = time.time()
    train_cfg = cfg.train_config()
    matrices: list[AccuracyMatrix] = []
    acc_runs: list[dict[str, float]] = []
    for r in range(cfg.repeats):
        tasks = prepare_tasks(datasets, vocab, encoder.config.n_max, repeat_index=r,
                              seed=cfg.seed + r)
        rep_cfg = replace(train_cfg, seed=cfg.seed + r)
        if cfg.regime == "deld-seq" or (cfg.regime == "ft-seq" and cfg.with_deld):
            _, matrix = run_deld_seq(encoder, tasks, rep_cfg)
            matrices.append(matrix)
            acc_runs.append(dict(zip(matrix.dataset_ids, matrix.final_accuracies())))
        elif cfg.regime == "ft-seq":
            _, matrix = run_ft_seq(encoder, tasks, rep_cfg)
            matrices.append(matrix)
            acc_runs.append(dict(zip(matrix.dataset_ids, matrix.final_accuracies())))
        elif cfg.regime == "ft-all":
            _, accs = run_ft_all(encoder, tasks, rep_cfg, with_deld=cfg.with_deld)
            acc_runs.append(accs)
        elif cfg.regime == "ft-per":
            _, accs = run_ft_per(encoder, tasks, rep_cfg, with_deld=cfg.with_deld)
            acc_runs.append(accs)
        else:
            raise ConfigError(f"regime {cfg.regime!r} is not a training regime")

    per_dataset = {gid: float(np.mean([run[gid] for run in acc_runs])) for gid in acc_runs[0]}
    matrix = _average_matrices(matrices) if matrices else None
    fgt = forgetting(matrix) if matrix is not None and matrix.size >= 2 else None
    regime_label = cfg.regime + (" w/ DELD" if cfg.with_deld and cfg.regime != "deld-seq" else "")
    return ExperimentReport.build(
        regime=regime_label, per_dataset_accuracy=per_dataset, forgetting=fgt, matrix=matrix,
        config=cfg.echo(), seed=cfg.seed, wall_clock_s=time.time() - start)


# ---------------------------------------------------------------------------
# prompt characterization

@dataclass
class CharacterizationReport:
    top_tokens: dict[str, list[tuple[str, float]]]  # generator -> ranked (token, cosine)

    def to_dict(self) -> dict:
        return {gen: [[tok, score] for tok, score in ranked]
                for gen, ranked in self.top_tokens.items()}


def characterize(bank: PromptBank, encoder: EncoderState, top_n: int,
                 vocab: Vocabulary | None = None) -> CharacterizationReport:
    """Rank vocabulary tokens by cosine similarity to each generator's prompt rows.

    A token's score is its best similarity across that prompt's rows; ties
    break toward the lower token id so rankings are reproducible.
    """
    if top_n < 1:
        raise ContractError(f"top_n must be >= 1, got {top_n}")
    if not bank.prompts:
        raise ContractError("bank is empty; nothing to characterize")
    table = encoder.token_embeddings.data
    norms = np.linalg.norm(table, axis=1)
    safe_norms = np.maximum(norms, 1e-300)
    report: dict[str, list[tuple[str, float]]] = {}
    for prompt in bank.prompts:
        rows = prompt.matrix.data
        row_norms = np.maximum(np.linalg.norm(rows, axis=1), 1e-300)
        sims = (rows / row_norms[:, None]) @ (table / safe_norms[:, None]).T
        best = sims.max(axis=0)
        count = min(top_n, table.shape[0])
        ranked_ids = np.lexsort((np.arange(len(best)), -best))[:count]
        report[prompt.generator_id] = [
            (vocab.id_to_token.get(int(t), str(int(t))) if vocab else str(int(t)),
             float(best[t]))
            for t in ranked_ids]
    return CharacterizationReport(top_tokens=report)


# ---------------------------------------------------------------------------
# forward-pass benchmark

def bench_forward(base: EncoderConfig, n_values: list[int], layer_values: list[int],
                  trials: int = 5) -> list[tuple[int, int, float]]:
    """Median wall-clock of a forward pass per (rows, layer-count) cell."""
    rows = []
    for n in n_values:
        if n < 1:
            raise ContractError(f"sequence length must be >= 1, got {n}")
        if n > base.n_max + base.prompt_capacity:
            raise CapacityError(f"n={n} exceeds positional capacity "
                                f"{base.n_max + base.prompt_capacity}")
    for layers in layer_values:
        state = freeze(init_encoder(replace(base, layers=layers)))
        for n in n_values:
            x = T.Tensor(np.random.default_rng(derive_seed(base.seed, n, layers))
                         .normal(size=(n, base.d)))
            mask = np.ones(n, dtype=bool)
            with T.no_grad():
                encode(state, x, mask)  # warm-up
                times = []
                for _ in range(trials):
                    t0 = time.perf_counter()
                    encode(state, x, mask)
                    times.append(time.perf_counter() - t0)
            rows.append((n, layers, float(np.median(times))))
    return rows


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    cfg = load_run_config(args)
    datasets = _load_datasets(cfg)
    os.makedirs(args.out, exist_ok=True)
    corpus_path = os.path.join(args.out, "corpus.jsonl")
    save_jsonl(datasets, corpus_path)
    summary = {
        "preset": cfg.preset, "seed": cfg.seed,
        "datasets": {ds.generator_id: {"true": int((ds.labels == 0).sum()),
                                       "fake": int((ds.labels == 1).sum())}
                     for ds in datasets},
        "path": os.path.basename(corpus_path),
    }
    atomic_write_json(os.path.join(args.out, "synth_report.json"), summary)
    print(f"wrote {corpus_path}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args)
    datasets = _load_datasets(cfg)
    vocab = build_vocab(datasets)
    state = init_encoder(cfg.encoder_config(vocab.size))
    sequences = [tokenize(ex.text, vocab, state.config.n_max)
                 for ds in datasets for ex in ds.examples]
    _, losses = pretrain_backbone(state, sequences, steps=cfg.pretrain_steps,
                                  mask_prob=cfg.mask_prob, lr=cfg.pretrain_lr,
                                  seed=derive_seed(cfg.seed, "pretrain"))
    freeze(state)
    os.makedirs(args.out, exist_ok=True)
    save_encoder(state, os.path.join(args.out, "encoder.bin"))
    vocab.save(os.path.join(args.out, "vocab.tsv"))
    atomic_write_json(os.path.join(args.out, "pretrain_report.json"), {
        "config": cfg.echo(), "steps": cfg.pretrain_steps,
        "initial_loss": float(np.mean(losses[:10])) if losses else None,
        "final_loss": float(np.mean(losses[-10:])) if losses else None,
    })
    print(f"wrote {os.path.join(args.out, 'encoder.bin')}")
    return 0


def cmd_run(args) -> int:
    cfg = load_run_config(args)
    datasets = _order_datasets(_load_datasets(cfg), cfg.order)
    os.makedirs(args.out, exist_ok=True)
    if cfg.regime == "zero-shot":
        if not cfg.endpoint:
            raise ConfigError("zero-shot regime needs --endpoint")
        zcfg = ZeroShotConfig(endpoint=cfg.endpoint, model=cfg.model,
                              api_key_env=cfg.api_key_env)
        report = evaluate_zero_shot(zcfg, datasets, seed=cfg.seed)
        report.config = cfg.echo()
    else:
        encoder, vocab = _backbone(cfg, datasets)
        report = run_experiment(cfg, encoder, vocab, datasets)
    atomic_write_json(os.path.join(args.out, "report.json"), report.to_dict())
    text = render_report_table(report)
    if report.matrix is not None:
        text += "\n" + render_matrix_table(report.matrix)
        if report.matrix.size >= 2:
            csv_text = forgetting_csv(report.matrix, per_dataset_forgetting(report.matrix))
            atomic_write_text(os.path.join(args.out, "forgetting.csv"), csv_text)
    atomic_write_text(os.path.join(args.out, "report.txt"), text)
    print(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args)
    datasets = _order_datasets(_load_datasets(cfg), cfg.order)
    encoder, vocab = _backbone(cfg, datasets)
    tasks = prepare_tasks(datasets, vocab, encoder.config.n_max, repeat_index=0, seed=cfg.seed)
    lengths = list(PROMPT_LENGTHS)
    positions = ["prepend", "append"]
    grid = ablate_prompts(encoder, tasks, lengths, positions, cfg.train_config())
    os.makedirs(args.out, exist_ok=True)
    atomic_write_json(os.path.join(args.out, "ablation_report.json"), {
        "config": cfg.echo(),
        "grid": {f"{length},{pos}": acc for (length, pos), acc in sorted(grid.items())},
    })
    text = render_grid_table(lengths, positions, grid)
    atomic_write_text(os.path.join(args.out, "ablation_report.txt"), text)
    print(text)
    return 0


def cmd_orders(args) -> int:
    cfg = load_run_config(args)
    datasets = _load_datasets(cfg)
    encoder, vocab = _backbone(cfg, datasets)
    results = {}
    for regime in ("ft-seq", "deld-seq"):
        order_results = []
        for idx, order in enumerate(CANONICAL_ORDERS, start=1):
            ordered = _order_datasets(datasets, list(order))
            tasks = prepare_tasks(ordered, vocab, encoder.config.n_max, repeat_index=0,
                                  seed=cfg.seed)
            run_cfg = cfg.train_config()
            runner = run_deld_seq if regime == "deld-seq" else run_ft_seq
            _, matrix = runner(encoder, tasks, run_cfg)
            order_results.append((f"Order-{idx}", matrix.average_final()))
        results[regime] = order_robustness(order_results)
    os.makedirs(args.out, exist_ok=True)
    atomic_write_json(os.path.join(args.out, "orders_report.json"),
                      {"config": cfg.echo(), "results": results})
    text = ""
    for regime, robustness in results.items():
        text += f"{regime}\n" + render_orders_table(robustness) + "\n"
    atomic_write_text(os.path.join(args.out, "orders_report.txt"), text)
    print(text)
    return 0


def cmd_zero_shot(args) -> int:
    args.regime = "zero-shot"
    return cmd_run(args)


def cmd_bench(args) -> int:
    cfg = load_run_config(args)
    n_values = [int(s) for s in args.sizes.split(",")]
    layer_values = [int(s) for s in args.layers.split(",")]
    base = EncoderConfig(d=args.d, layers=max(layer_values), heads=4, ffn_dim=2 * args.d,
                         vocab_size=64, n_max=max(n_values), prompt_capacity=0, seed=cfg.seed)
    rows = bench_forward(base, n_values, layer_values)
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "bench.csv"), timings_csv(rows))
    atomic_write_json(os.path.join(args.out, "bench_report.json"), {
        "d": args.d, "cells": [{"n": n, "layers": l, "median_seconds": s} for n, l, s in rows],
    })
    for n, l, s in rows:
        print(f"n={n} layers={l} median={s * 1e3:.2f} ms")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deld",
                                     description="Continual prompt-tuning experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--data", default=None, help="JSONL corpus path")
        p.add_argument("--preset", default=None, choices=["conflict", "chance"])

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)

    p = sub.add_parser("pretrain", help="pre-train and freeze the backbone")
    common(p)

    p = sub.add_parser("run", help="run one experiment regime")
    common(p)
    p.add_argument("--regime", choices=list(REGIMES), default=None)
    p.add_argument("--with-deld", dest="with_deld", action="store_true")
    p.add_argument("--order", help="comma-separated dataset ids")
    p.add_argument("--prompt-len", dest="prompt_len", type=int, default=None)
    p.add_argument("--position", choices=["prepend", "append"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--encoder", help="pre-trained encoder weights path")
    p.add_argument("--vocab", help="vocabulary path (with --encoder)")
    p.add_argument("--endpoint", help="chat-completion endpoint (zero-shot)")
    p.add_argument("--model", default=None, help="remote model name (zero-shot)")

    p = sub.add_parser("ablate", help="prompt length x position grid")
    common(p)
    p.add_argument("--encoder", help="pre-trained encoder weights path")
    p.add_argument("--vocab", help="vocabulary path (with --encoder)")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("orders", help="the four canonical training orders")
    common(p)
    p.add_argument("--encoder", help="pre-trained encoder weights path")
    p.add_argument("--vocab", help="vocabulary path (with --encoder)")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("zero-shot", help="zero-shot baseline via remote endpoint")
    common(p)
    p.add_argument("--endpoint", required=True)
    p.add_argument("--model", default=None)

    p = sub.add_parser("bench", help="forward-pass timing table")
    common(p)
    p.add_argument("--sizes", default="256,512", help="comma-separated row counts")
    p.add_argument("--layers", default="2,4", help="comma-separated layer counts")
    p.add_argument("--d", type=int, default=64)

    return parser


HANDLERS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "orders": cmd_orders,
    "zero-shot": cmd_zero_shot,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except DeldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
