"""Accuracy bookkeeping, the forgetting metric, and ablation aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ContractError
from .seeding import derive_seed

SCHEMA_VERSION = 1


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Percentage of matching entries."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.size == 0 or preds.shape != labs.shape:
        raise ContractError(f"accuracy: need equal nonempty lists, got {preds.shape} vs {labs.shape}")
    return 100.0 * float((preds == labs).mean())


class AccuracyMatrix:
    """a[i, k]: accuracy on dataset i after the stage that trained dataset k.

    Cells exist for k >= i (you can only re-test what has been trained at
    least once); a completed sequential run fills the whole lower wedge.
    Indices are 0-based here; reports render them 1-based.
    """

    def __init__(self, dataset_ids: Sequence[str]):
        self.dataset_ids = list(dataset_ids)
        self.cells: dict[tuple[int, int], float] = {}

    @property
    def size(self) -> int:
        return len(self.dataset_ids)

    def set(self, dataset_index: int, stage_index: int, value: float) -> None:
        if not 0 <= dataset_index <= stage_index < self.size:
            raise ContractError(f"cell ({dataset_index}, {stage_index}) outside the k >= i wedge")
        if not 0.0 <= value <= 100.0:
            raise ContractError(f"accuracy {value} outside [0, 100]")
        self.cells[(dataset_index, stage_index)] = float(value)

    def get(self, dataset_index: int, stage_index: int) -> float:
        return self.cells[(dataset_index, stage_index)]

    def is_complete(self) -> bool:
        return all((i, k) in self.cells for k in range(self.size) for i in range(k + 1))

    def final_accuracies(self) -> list[float]:
        last = self.size - 1
        return [self.get(i, last) for i in range(self.size)]

    def average_final(self) -> float:
        return float(np.mean(self.final_accuracies()))

    def to_dict(self) -> dict:
        return {"dataset_ids": self.dataset_ids,
                "cells": {f"{i},{k}": v for (i, k), v in sorted(self.cells.items())}}

    @classmethod
    def from_dict(cls, payload: dict) -> "AccuracyMatrix":
        matrix = cls(payload["dataset_ids"])
        for key, value in payload["cells"].items():
            i, k = key.split(",")
            matrix.set(int(i), int(k), value)
        return matrix


def per_dataset_forgetting(matrix: AccuracyMatrix) -> list[float]:
    """For each non-final dataset: best pre-final accuracy minus final accuracy."""
    if matrix.size < 2:
        raise ContractError("forgetting needs at least 2 datasets")
    if not matrix.is_complete():
        raise ContractError("forgetting needs a completed accuracy matrix")
    last = matrix.size - 1
    values = []
    for i in range(last):
        best = max(matrix.get(i, k) for k in range(i, last))
        values.append(best - matrix.get(i, last))
    return values


def forgetting(matrix: AccuracyMatrix) -> float:
    """Mean over earlier datasets of (best earlier accuracy - final accuracy).

    Negative values mean the final stage improved earlier datasets.
    """
    return float(np.mean(per_dataset_forgetting(matrix)))


@dataclass
class ExperimentReport:
    regime: str
    dataset_ids: list[str]
    per_dataset_accuracy: dict[str, float]
    average_accuracy: float
    forgetting: float | None = None
    matrix: AccuracyMatrix | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    wall_clock_s: float = 0.0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        mean = float(np.mean(list(self.per_dataset_accuracy.values())))
        if abs(mean - self.average_accuracy) > 1e-9:
            raise ContractError(
                f"report average {self.average_accuracy} does not recompute from parts ({mean})")

    @classmethod
    def build(cls, regime: str, per_dataset_accuracy: dict[str, float], **kwargs) -> "ExperimentReport":
        return cls(regime=regime,
                   dataset_ids=list(per_dataset_accuracy),
                   per_dataset_accuracy=dict(per_dataset_accuracy),
                   average_accuracy=float(np.mean(list(per_dataset_accuracy.values()))),
                   **kwargs)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "regime": self.regime,
            "dataset_ids": self.dataset_ids,
            "per_dataset_accuracy": self.per_dataset_accuracy,
            "average_accuracy": self.average_accuracy,
            "forgetting": self.forgetting,
            "accuracy_matrix": self.matrix.to_dict() if self.matrix else None,
            "config": self.config,
            "seed": self.seed,
            "wall_clock_s": self.wall_clock_s,
        }


def order_robustness(order_results: Sequence[tuple[str, float]]) -> dict:
    """Per-order average accuracies plus the max-min spread, in input order."""
    if len(order_results) < 2:
        raise ContractError("order robustness needs at least 2 orders")
    averages = [float(acc) for _, acc in order_results]
    return {
        "orders": [name for name, _ in order_results],
        "averages": averages,
        "spread": max(averages) - min(averages),
    }


def ablate_prompts(encoder, tasks, lengths: Sequence[int], positions: Sequence[str],
                   cfg) -> dict[tuple[int, str], float]:
    """One full sequential prompt-tuning run per (length, position) cell.

    Returns the grid of average final accuracies; cells get independent seeds
    derived from (cfg.seed, cell index) so they can be reproduced alone.
    """
    from .training import run_deld_seq  # deferred: avoids a module cycle

    grid: dict[tuple[int, str], float] = {}
    for index, (length, position) in enumerate(
            (l, p) for l in lengths for p in positions):
        cell_cfg = replace(cfg, prompt_len=length, position_mode=position,
                           seed=derive_seed(cfg.seed, "ablate", index))
        _, matrix = run_deld_seq(encoder, tasks, cell_cfg)
        grid[(length, position)] = matrix.average_final()
    return grid
