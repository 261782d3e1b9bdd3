"""Zero-shot baseline against any chat-completion-compatible HTTP endpoint.

The instruction prompt is a fixed byte-exact string; responses are parsed by
their first character only (anything else counts as unparsable, and
unparsable verdicts score as wrong). This module never touches training
state.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import requests

from .corpus import GeneratorDataset
from .errors import ConfigError, ContractError, StatusError, TransportError
from .metrics import ExperimentReport

SYSTEM_PROMPT = (
    'Act as a disinformation detector. Given the following news piece, which '
    'category does this news belong to? Return "1" if you think the news piece '
    'is disinformation; otherwise, return "0". Note that there is no need for '
    'an explanation.'
)

USER_PREFIX = "news: "


@dataclass(frozen=True)
class ZeroShotConfig:
    endpoint: str
    model: str
    api_key_env: str = ""          # name of the env var holding the key; empty = no auth
    timeout_s: float = 30.0
    max_retries: int = 3
    max_parallel: int = 4
    backoff_s: float = 0.5

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ConfigError(f"timeout must be positive, got {self.timeout_s}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.max_parallel < 1:
            raise ConfigError(f"max_parallel must be >= 1, got {self.max_parallel}")


@dataclass
class ZeroShotVerdict:
    example_id: int
    raw_response: str
    parsed: int | None  # 0, 1, or None when unparsable


def build_prompt(article_text: str) -> tuple[str, str]:
    """The (system, user) message pair; the article passes through verbatim."""
    if not article_text:
        raise ContractError("article text must be nonempty")
    return SYSTEM_PROMPT, USER_PREFIX + article_text


def _parse_verdict(content: str) -> int | None:
    trimmed = content.strip()
    if trimmed.startswith("0"):
        return 0
    if trimmed.startswith("1"):
        return 1
    return None


def classify_remote(cfg: ZeroShotConfig, article_text: str, example_id: int = 0) -> ZeroShotVerdict:
    """One chat-completion round trip; retries transport failures with backoff."""
    system, user = build_prompt(article_text)
    payload = {
        "model": cfg.model,
        "messages": [{"role": "system", "content": system},
                     {"role": "user", "content": user}],
        "temperature": 0,
    }
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(cfg.api_key_env, "") if cfg.api_key_env else ""
    if key:
        headers["Authorization"] = f"Bearer {key}"

    last_exc: Exception | None = None
    for attempt in range(cfg.max_retries + 1):
        try:
            resp = requests.post(cfg.endpoint, json=payload, headers=headers,
                                 timeout=cfg.timeout_s)
        except requests.RequestException as exc:
            last_exc = exc
            if attempt < cfg.max_retries:
                time.sleep(cfg.backoff_s * (2 ** attempt))
            continue
        if not 200 <= resp.status_code < 300:
            raise StatusError(f"endpoint answered {resp.status_code}: {resp.text[:200]}")
        content = resp.json()["choices"][0]["message"]["content"]
        return ZeroShotVerdict(example_id=example_id, raw_response=content,
                               parsed=_parse_verdict(content))
    raise TransportError(f"request failed after {cfg.max_retries + 1} attempts: {last_exc}")


def evaluate_zero_shot(cfg: ZeroShotConfig, datasets: list[GeneratorDataset],
                       seed: int = 0) -> ExperimentReport:
    """Per-dataset accuracy with unparsable verdicts counted as incorrect."""
    start = time.time()
    per_dataset: dict[str, float] = {}
    for ds in datasets:
        with ThreadPoolExecutor(max_workers=cfg.max_parallel) as pool:
            verdicts = list(pool.map(
                lambda pair: classify_remote(cfg, pair[1].text, example_id=pair[0]),
                enumerate(ds.examples)))
        verdicts.sort(key=lambda v: v.example_id)
        correct = sum(1 for v, ex in zip(verdicts, ds.examples) if v.parsed == ex.label)
        per_dataset[ds.generator_id] = 100.0 * correct / len(ds.examples)
    return ExperimentReport.build(
        regime="zero-shot",
        per_dataset_accuracy=per_dataset,
        config={"model": cfg.model, "endpoint": cfg.endpoint, "temperature": 0},
        seed=seed,
        wall_clock_s=time.time() - start,
    )
