"""Disentanglement metrics and attention-entropy analysis.

VI is in bits and rescaled to ``100 * (1 - VI / log2 N)``. Clusters count as
correct only on exact set match. Link recall uses every gold parent of a
multi-parent utterance as a separate gold link.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .data import Dialogue, ReplyLink, ResponseSelectionExample, ThreadPartition, partition_from_links
from .model import Model
from .numerics import entropy


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterScores:
    vi_scaled: float
    ari: float
    cluster_p: float
    cluster_r: float
    cluster_f1: float


@dataclass(frozen=True)
class LinkScores:
    link_p: float
    link_r: float
    link_f1: float


def f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def contingency(gold: ThreadPartition, pred: ThreadPartition) -> np.ndarray:
    if gold.elements != pred.elements:
        raise EvaluationError("partitions cover different element sets")
    if not gold.elements:
        raise EvaluationError("empty partitions")
    gl, pl = gold.labels(), pred.labels()
    table = np.zeros((len(gold.clusters), len(pred.clusters)), dtype=np.int64)
    for e, g in gl.items():
        table[g, pl[e]] += 1
    return table


def variation_of_information(gold: ThreadPartition, pred: ThreadPartition) -> tuple[float, float]:
    """Raw VI in bits and the 0-100 higher-is-better rescaling."""
    table = contingency(gold, pred)
    n = table.sum()
    p = table[table > 0] / n
    a = table.sum(axis=1) / n
    b = table.sum(axis=0) / n
    h_joint = -np.sum(p * np.log2(p))
    h_a = -np.sum(a * np.log2(a))
    h_b = -np.sum(b * np.log2(b))
    raw = max(0.0, float(2 * h_joint - h_a - h_b))
    scaled = 100.0 if n == 1 else 100.0 * (1.0 - raw / math.log2(n))
    return raw, scaled


def _pairs(x: np.ndarray) -> float:
    return float(np.sum(x * (x - 1)) / 2)


def adjusted_rand_index(gold: ThreadPartition, pred: ThreadPartition) -> float:
    table = contingency(gold, pred)
    n = int(table.sum())
    index = _pairs(table)
    sa, sb = _pairs(table.sum(axis=1)), _pairs(table.sum(axis=0))
    total = n * (n - 1) / 2
    expected = sa * sb / total if total else 0.0
    max_index = (sa + sb) / 2
    if max_index == expected:
        return 1.0
    return (index - expected) / (max_index - expected)


def cluster_prf(gold: ThreadPartition, pred: ThreadPartition) -> tuple[float, float, float]:
    """Exact-match cluster precision, recall and F1 as percentages."""
    correct, n_pred, n_gold = _cluster_counts(gold, pred)
    p = 100.0 * correct / n_pred
    r = 100.0 * correct / n_gold
    return p, r, f1(p, r)


def _cluster_counts(gold: ThreadPartition, pred: ThreadPartition) -> tuple[int, int, int]:
    if gold.elements != pred.elements:
        raise EvaluationError("partitions cover different element sets")
    return len(gold.clusters & pred.clusters), len(pred.clusters), len(gold.clusters)


def _link_counts(gold: Mapping[int, set[int]], pred: Sequence[ReplyLink]) -> tuple[int, int, int]:
    hits = 0
    for link in pred:
        if link.child not in gold:
            raise EvaluationError(f"utterance {link.child} has no gold link")
        hits += link.parent in gold[link.child]
    return hits, len(pred), sum(len(ps) for ps in gold.values())


def link_prf(gold: Mapping[int, set[int]], pred: Sequence[ReplyLink]) -> tuple[float, float, float]:
    """Link precision, recall and F1 as percentages; ``gold`` maps child -> parents."""
    hits, n_pred, n_gold = _link_counts(gold, pred)
    p = 100.0 * hits / n_pred if n_pred else 0.0
    r = 100.0 * hits / n_gold if n_gold else 0.0
    return p, r, f1(p, r)


def attention_entropy_report(model: Model, examples: Sequence[ResponseSelectionExample]) -> tuple[float, float]:
    """Mean entropy (nats) of alpha on correct and on incorrect candidates."""
    if not examples:
        raise EvaluationError("no examples")
    good, bad = [], []
    for ex in examples:
        ent = entropy(model.forward(ex.context, ex.candidates).alpha)
        for k, h in enumerate(ent):
            (good if k == ex.correct_index else bad).append(float(h))
    return float(np.mean(good)), float(np.mean(bad))


@dataclass(frozen=True)
class Report:
    clusters: ClusterScores
    links: LinkScores
    vi_raw: float

    def row(self) -> str:
        c, l = self.clusters, self.links
        values = (c.vi_scaled, 100 * c.ari, c.cluster_p, c.cluster_r, c.cluster_f1, l.link_p, l.link_r, l.link_f1)
        return "\t".join(f"{v:.1f}" for v in values)


HEADER = "VI\tARI\tcP\tcR\tcF1\tlP\tlR\tlF1"


def evaluate(gold: Sequence[Dialogue], pred_links: Sequence[Sequence[ReplyLink]]) -> Report:
    """Score predicted links against gold dialogues.

    VI and ARI are averaged over dialogues; cluster and link precision and
    recall pool their counts over all dialogues before dividing.
    """
    if len(gold) != len(pred_links):
        raise EvaluationError(f"{len(gold)} gold dialogues but {len(pred_links)} predicted link sets")
    if not gold:
        raise EvaluationError("nothing to evaluate")
    vis, vis_raw, aris = [], [], []
    cc = cp = cg = lh = lp = lg = 0
    for d, links in zip(gold, pred_links):
        if len(links) != len(d):
            raise EvaluationError(f"expected {len(d)} predicted links, got {len(links)}")
        g = partition_from_links(d.gold_links or (), len(d))
        p = partition_from_links(links, len(d))
        raw, scaled = variation_of_information(g, p)
        vis_raw.append(raw)
        vis.append(scaled)
        aris.append(adjusted_rand_index(g, p))
        a, b, c = _cluster_counts(g, p)
        cc, cp, cg = cc + a, cp + b, cg + c
        a, b, c = _link_counts(d.gold_parents(), links)
        lh, lp, lg = lh + a, lp + b, lg + c
    P, R = 100.0 * cc / cp, 100.0 * cc / cg
    lP, lR = 100.0 * lh / lp, 100.0 * lh / lg
    return Report(
        ClusterScores(float(np.mean(vis)), float(np.mean(aris)), P, R, f1(P, R)),
        LinkScores(lP, lR, f1(lP, lR)),
        float(np.mean(vis_raw)),
    )
