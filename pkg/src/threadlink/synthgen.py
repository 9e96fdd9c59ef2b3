"""Synthetic entangled dialogues with known reply structure.

Each dialogue interleaves ``n_threads`` independently grown threads. A thread
owns a private topic vocabulary (a random subset of the token space, disjoint
from the other threads of the same dialogue); its utterances draw tokens from
that subset with probability ``topic_purity`` and from the whole vocabulary
otherwise. Replies attach to a uniformly chosen earlier utterance of the same
thread and the first utterance of every thread links to itself.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataError, Dialogue, ReplyLink, ResponseSelectionExample, Utterance


class ConfigError(ValueError):
    pass


class SamplingError(DataError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_threads: int = 3
    utterances_per_thread: tuple[int, int] = (8, 10)
    vocab_size: int = 1000
    topic_tokens_per_thread: int = 5
    tokens_per_utterance: tuple[int, int] = (4, 6)
    speakers_per_thread: int = 2
    topic_purity: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.utterances_per_thread
        tlo, thi = self.tokens_per_utterance
        if self.n_threads < 1:
            raise ConfigError("n_threads must be >= 1")
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad utterances_per_thread range {self.utterances_per_thread}")
        if not 1 <= tlo <= thi:
            raise ConfigError(f"bad tokens_per_utterance range {self.tokens_per_utterance}")
        if self.topic_tokens_per_thread < 1 or self.speakers_per_thread < 1:
            raise ConfigError("topic_tokens_per_thread and speakers_per_thread must be >= 1")
        if self.topic_tokens_per_thread * self.n_threads > self.vocab_size:
            raise ConfigError("topic vocabularies do not fit disjointly into vocab_size")
        if not 0.0 <= self.topic_purity <= 1.0:
            raise ConfigError("topic_purity must lie in [0, 1]")


def _parse_range(value: str) -> tuple[int, int]:
    parts = value.replace(",", " ").replace("-", " ").split()
    if len(parts) == 1:
        return int(parts[0]), int(parts[0])
    if len(parts) != 2:
        raise ConfigError(f"cannot parse range {value!r}")
    return int(parts[0]), int(parts[1])


def gen_config_from_mapping(values: dict[str, str], base: GenConfig | None = None) -> GenConfig:
    """Build a GenConfig from string key=value pairs (config files, CLI)."""
    base = base or GenConfig()
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(GenConfig)}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"unknown generator key {key!r}")
        if key in ("utterances_per_thread", "tokens_per_utterance"):
            kwargs[key] = _parse_range(raw)
        elif key == "topic_purity":
            kwargs[key] = float(raw)
        else:
            kwargs[key] = int(raw)
    return dataclasses.replace(base, **kwargs)


def read_key_value_file(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def generate_dialogue(cfg: GenConfig, rng: np.random.Generator | None = None) -> Dialogue:
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    k = cfg.topic_tokens_per_thread
    topics = rng.choice(cfg.vocab_size, size=cfg.n_threads * k, replace=False).reshape(cfg.n_threads, k)

    threads = []  # per thread: list of (speaker, tokens, parent index within thread or None)
    for t in range(cfg.n_threads):
        length = int(rng.integers(cfg.utterances_per_thread[0], cfg.utterances_per_thread[1] + 1))
        utts = []
        for j in range(length):
            n_tok = int(rng.integers(cfg.tokens_per_utterance[0], cfg.tokens_per_utterance[1] + 1))
            on_topic = rng.random(n_tok) < cfg.topic_purity
            tokens = np.where(
                on_topic,
                rng.choice(topics[t], size=n_tok),
                rng.integers(0, cfg.vocab_size, size=n_tok),
            )
            speaker = f"s{t * cfg.speakers_per_thread + int(rng.integers(cfg.speakers_per_thread))}"
            parent = None if j == 0 else int(rng.integers(0, j))
            utts.append((speaker, tuple(int(x) for x in tokens), parent))
        threads.append(utts)

    # random interleaving that keeps each thread in order
    order = np.concatenate([np.full(len(th), t) for t, th in enumerate(threads)])
    rng.shuffle(order)

    position: dict[tuple[int, int], int] = {}
    seen = [0] * cfg.n_threads
    utterances, links = [], []
    for t in order:
        j = seen[t]
        seen[t] += 1
        i = len(utterances)
        position[(t, j)] = i
        speaker, tokens, parent = threads[t][j]
        utterances.append(Utterance(i, speaker, tokens))
        links.append(ReplyLink(i, i if parent is None else position[(t, parent)]))
    return Dialogue(tuple(utterances), tuple(links))


def dialogue_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for dialogue ``index`` under master ``seed``."""
    return np.random.default_rng([seed, index])


def generate_corpus(cfg: GenConfig, n_dialogues: int, start: int = 0) -> list[Dialogue]:
    return [generate_dialogue(cfg, dialogue_rng(cfg.seed, start + i)) for i in range(n_dialogues)]


def _negative_pool(d: Dialogue, pool: Sequence[Dialogue]) -> list[Dialogue]:
    others = [p for p in pool if p is not d]
    if not others or not any(len(p) for p in others):
        raise SamplingError("pool has no utterances outside the source dialogue")
    return others


def _sample_negatives(others: Sequence[Dialogue], count: int, rng: np.random.Generator) -> list[Utterance]:
    sizes = np.array([len(p) for p in others])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    flat = rng.choice(total, size=count, replace=total < count)
    out = []
    for f in flat:
        di = int(np.searchsorted(offsets, f, side="right")) - 1
        out.append(others[di].utterances[int(f - offsets[di])])
    return out


def make_selection_example(
    d: Dialogue,
    split_point: int,
    m: int,
    pool: Sequence[Dialogue],
    rng: np.random.Generator,
) -> ResponseSelectionExample:
    """Context = first ``split_point`` utterances, target = the next one."""
    if not 1 <= split_point < len(d):
        raise DataError(f"split_point {split_point} outside [1, {len(d)})")
    if m < 2:
        raise DataError("m must be >= 2")
    negatives = _sample_negatives(_negative_pool(d, pool), m - 1, rng)
    correct = int(rng.integers(m))
    candidates = negatives[:correct] + [d.utterances[split_point]] + negatives[correct:]
    return ResponseSelectionExample(d.utterances[:split_point], tuple(candidates), correct)


def augment_dialogue(
    d: Dialogue, m: int, pool: Sequence[Dialogue], rng: np.random.Generator
) -> list[ResponseSelectionExample]:
    """One selection example per prefix length 1..len(d)-1."""
    if len(d) < 2:
        raise DataError("need at least two utterances to augment")
    return [make_selection_example(d, i, m, pool, rng) for i in range(1, len(d))]


def build_selection_set(
    dialogues: Sequence[Dialogue], m: int, seed: int, pool: Sequence[Dialogue] | None = None
) -> list[ResponseSelectionExample]:
    """Augmented examples for every dialogue; negatives come from ``pool`` (default: the set itself)."""
    rng = np.random.default_rng(seed)
    pool = dialogues if pool is None else pool
    out = []
    for d in dialogues:
        out.extend(augment_dialogue(d, m, pool, rng))
    return out
