"""Zero-shot and supervised reply-to prediction over a sliding window."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .data import Dialogue, ReplyLink, ThreadPartition, Utterance, partition_from_links
from .model import Model


@dataclass(frozen=True)
class DisentangleConfig:
    window: int = 8

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")


def predict_link(model: Model, context: Sequence[Utterance], current: Utterance) -> ReplyLink:
    """Link ``current`` to the context utterance with the largest attention weight.

    The self-pair position wins when it carries the largest weight, and is
    forced when the context is empty.
    """
    if not context:
        return ReplyLink(current.id, current.id)
    trace = model.forward(context, [current])
    best = int(np.argmax(trace.alpha[0]))  # first maximum, i.e. lowest index
    if best == len(context):
        return ReplyLink(current.id, current.id)
    return ReplyLink(current.id, context[best].id)


def disentangle(
    model: Model, d: Dialogue, cfg: DisentangleConfig | None = None
) -> tuple[list[ReplyLink], ThreadPartition]:
    cfg = cfg or DisentangleConfig()
    if cfg.window > model.cfg.max_context:
        raise ValueError(f"window {cfg.window} exceeds model max_context {model.cfg.max_context}")
    if len(d) == 0:
        raise ValueError("empty dialogue")
    utts = d.without_links().utterances
    links = [predict_link(model, utts[max(0, t - cfg.window):t], utts[t]) for t in range(len(utts))]
    return links, partition_from_links(links, len(utts))
