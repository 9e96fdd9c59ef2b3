"""Losses, the weighted multi-task objective, Adam, and selection metrics."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, Dialogue, ResponseSelectionExample, Utterance
from .metrics import EvaluationError
from .model import Model
from .numerics import NumericalError, grad_check

log = logging.getLogger(__name__)


class TrainingAborted(NumericalError):
    def __init__(self, msg: str, batch: Sequence | None = None, dump: Path | None = None):
        super().__init__(msg)
        self.batch = batch
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    w: float = 0.25
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 1
    m_candidates: int = 10
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("w must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")
        if self.m_candidates < 2:
            raise ValueError("m_candidates must be >= 2")


@dataclass(frozen=True)
class LossBreakdown:
    l_res: float
    l_attn: float
    w: float

    @property
    def total(self) -> float:
        return (1.0 - self.w) * self.l_res + self.w * self.l_attn


# ------------------------------------------------------------------- losses


def response_loss(s: float, is_correct: bool) -> tuple[float, float]:
    """Binary cross-entropy of score ``s`` and its derivative w.r.t. ``s``."""
    if not 0.0 < s < 1.0:
        raise NumericalError(f"score {s} outside (0, 1)")
    if is_correct:
        return -math.log(s), -1.0 / s
    return -math.log1p(-s), 1.0 / (1.0 - s)


def response_loss_from_logit(z: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same loss as :func:`response_loss` with ``s = sigmoid(z)``, evaluated on the logit.

    Returns per-candidate losses and their derivatives w.r.t. ``z``.
    """
    y = labels.astype(np.float64)
    loss = np.where(labels, np.logaddexp(0.0, -z), np.logaddexp(0.0, z))
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return loss, s - y


def attention_loss(alpha: np.ndarray, is_correct: bool) -> tuple[float, np.ndarray]:
    """Squared error on the self-pair weight: target 0 for the true response, 1 otherwise."""
    alpha = np.asarray(alpha, dtype=np.float64)
    target = 0.0 if is_correct else 1.0
    diff = alpha[-1] - target
    grad = np.zeros_like(alpha)
    grad[-1] = 2.0 * diff
    return float(diff * diff), grad


def link_loss(alpha: np.ndarray, gold_index: int) -> tuple[float, np.ndarray]:
    """Cross-entropy between ``alpha`` and a one-hot target; gradient w.r.t. the attention logits."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if not 0 <= gold_index < alpha.shape[-1]:
        raise DataError(f"gold index {gold_index} outside window of {alpha.shape[-1]}")
    grad = alpha.copy()
    grad[gold_index] -= 1.0
    return float(-np.log(max(alpha[gold_index], 1e-300))), grad


def selection_loss(model: Model, ex: ResponseSelectionExample, w: float, grads: bool = True):
    """Combined loss summed over all candidates of one example."""
    trace = model.forward(ex.context, ex.candidates)
    labels = np.array(ex.labels)
    l_res, _ = response_loss_from_logit(trace.logit, labels)
    a_self = trace.alpha[:, -1]
    diff = a_self - np.where(labels, 0.0, 1.0)
    breakdown = LossBreakdown(float(l_res.sum()), float((diff * diff).sum()), w)
    if not grads:
        return breakdown, None, trace
    d_logit, d_alpha = _selection_upstream(trace, ex, w)
    g = model.backward(trace, d_logit=d_logit, d_alpha=d_alpha)
    return breakdown, g, trace


def selection_loss_delta(model: Model, ex: ResponseSelectionExample, w: float, ref) -> float:
    """Combined loss minus its value at the reference trace ``ref``.

    Evaluated term by term without cancellation, so finite differences see
    the change in the loss rather than the rounding of its absolute value.
    """
    trace = model.forward(ex.context, ex.candidates)
    labels = np.array(ex.labels)
    a = np.where(labels, -trace.logit, trace.logit)
    a0 = np.where(labels, -ref.logit, ref.logit)
    d_res = np.log1p(np.exp(-np.logaddexp(0.0, -a0)) * np.expm1(a - a0))
    t = np.where(labels, 0.0, 1.0)
    al, al0 = trace.alpha[:, -1], ref.alpha[:, -1]
    d_attn = (al - al0) * (al + al0 - 2.0 * t)
    return (1.0 - w) * math.fsum(d_res) + w * math.fsum(d_attn)


def check_selection_gradients(model: Model, ex: ResponseSelectionExample, w: float, h: float = 1e-5) -> float:
    """Max relative error of the combined-loss gradient against central differences.

    Every trainable array (plus the token table) is checked coordinate by
    coordinate; perturbed losses are evaluated as increments over the
    unperturbed one (:func:`selection_loss_delta`). The differences run on an
    extended-precision copy of the model where the platform has one: with
    h = 1e-5 a float64 forward pass rounds away the effect of the step on
    gradients much below 1e-8.
    """
    trace = model.forward(ex.context, ex.candidates)
    analytic = model.backward(trace, *_selection_upstream(trace, ex, w), token_grads=True)
    wide = model.astype(np.longdouble)
    ref = wide.forward(ex.context, ex.candidates)
    return grad_check(
        lambda _: (0.0, analytic), wide.arrays(), h=h,
        value=lambda _: selection_loss_delta(wide, ex, w, ref),
    )


def _selection_upstream(trace, ex: ResponseSelectionExample, w: float):
    labels = np.array(ex.labels)
    _, d_logit = response_loss_from_logit(trace.logit, labels)
    d_alpha = np.zeros_like(trace.alpha)
    d_alpha[:, -1] = w * 2.0 * (trace.alpha[:, -1] - np.where(labels, 0.0, 1.0))
    return (1.0 - w) * d_logit, d_alpha


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -------------------------------------------------------------- evaluation


def window_example(ex: ResponseSelectionExample, max_context: int) -> ResponseSelectionExample:
    """Keep only the latest ``max_context`` context utterances."""
    if len(ex.context) <= max_context:
        return ex
    return ResponseSelectionExample(ex.context[-max_context:], ex.candidates, ex.correct_index)


def candidate_rank(scores: np.ndarray, correct: int) -> int:
    """1-based rank of ``correct`` when sorting by score descending, ties by index."""
    sc = scores[correct]
    return 1 + int((scores > sc).sum()) + int((scores[:correct] == sc).sum())


def ranking_metrics(ranks: Sequence[int], ks: Sequence[int]) -> dict[str, float]:
    if not len(ranks):
        raise EvaluationError("no examples to evaluate")
    r = np.asarray(ranks)
    out = {f"R@{k}": float((r <= k).mean()) for k in ks}
    out["MRR"] = float((1.0 / r).mean())
    return out


def eval_selection(model: Model, data: Sequence[ResponseSelectionExample],
                   ks: Sequence[int] = (1, 5, 10)) -> dict[str, float]:
    if not data:
        raise EvaluationError("no examples to evaluate")
    m = min(len(ex.candidates) for ex in data)
    if any(k > m for k in ks):
        raise EvaluationError(f"k in {list(ks)} exceeds the {m} candidates")
    ranks = []
    for ex in data:
        trace = model.forward(ex.context, ex.candidates)
        ranks.append(candidate_rank(trace.logit, ex.correct_index))
    return ranking_metrics(ranks, ks)


# ----------------------------------------------------------------- training


@dataclass
class EpochLog:
    epoch: int
    l_res: float
    l_attn: float
    metrics: dict[str, float]

    def tsv(self) -> str:
        m = self.metrics
        return "\t".join(
            [str(self.epoch)] + [f"{x:.6f}" for x in (self.l_res, self.l_attn, m["R@1"], m.get("R@5", math.nan), m["MRR"])]
        )


@dataclass
class TrainResult:
    model: Model
    best: Model
    best_epoch: int
    history: list[EpochLog] = field(default_factory=list)


def _mean_grads(acc: dict[str, np.ndarray] | None, g: dict[str, np.ndarray], names) -> dict[str, np.ndarray]:
    if acc is None:
        return {k: g[k].copy() for k in names}
    for k in names:
        acc[k] += g[k]
    return acc


def _abort(msg: str, batch, out_dir: Path | None) -> TrainingAborted:
    dump = None
    if out_dir is not None:
        dump = out_dir / "nan-batch.txt"
        lines = []
        for ex in batch:
            lines.append("context: " + " | ".join(" ".join(map(str, u.tokens)) for u in ex.context))
            lines += [f"cand[{k}]{'*' if ok else ''}: " + " ".join(map(str, c.tokens))
                      for k, (c, ok) in enumerate(zip(ex.candidates, ex.labels))]
        dump.write_text("\n".join(lines) + "\n")
    return TrainingAborted(msg + (f" (batch dumped to {dump})" if dump else ""), batch, dump)


def train(
    model: Model,
    data: Sequence[ResponseSelectionExample],
    cfg: TrainConfig,
    val: Sequence[ResponseSelectionExample] | None = None,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Train in place with the ``(1-w)*L_res + w*L_attn`` objective.

    Every candidate of every example is scored. The best epoch by validation
    R@1 (training R@1 when no validation set is given) is kept as ``best``.
    """
    if not data:
        raise DataError("no training examples")
    too_long = [len(ex.context) for ex in data if len(ex.context) > model.cfg.max_context]
    if too_long:
        raise DataError(f"context of {max(too_long)} exceeds max_context {model.cfg.max_context}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    names = list(model.trainable())
    opt = Adam(model.trainable(), lr=cfg.learning_rate)
    eval_set = val if val else data
    ks = [k for k in (1, 5, 10) if k <= min(len(ex.candidates) for ex in eval_set)]

    result = TrainResult(model=model, best=model.copy(), best_epoch=0)
    best_r1 = -1.0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        sum_res = sum_attn = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[start:start + cfg.batch_size]]
            acc = None
            for ex in batch:
                br, g, _ = selection_loss(model, ex, cfg.w)
                if not (math.isfinite(br.l_res) and math.isfinite(br.l_attn)):
                    raise _abort(f"non-finite loss at epoch {epoch}", batch, out)
                sum_res += br.l_res
                sum_attn += br.l_attn
                acc = _mean_grads(acc, g, names)
            if len(batch) > 1:
                for k in names:
                    acc[k] /= len(batch)
            if not all(np.isfinite(acc[k]).all() for k in names):
                raise _abort(f"non-finite gradient at epoch {epoch}", batch, out)
            opt.step(acc)

        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            metrics = eval_selection(model, eval_set, ks=ks)
            entry = EpochLog(epoch, sum_res / len(data), sum_attn / len(data), metrics)
            result.history.append(entry)
            log.info("epoch %d  %s", epoch, entry.tsv())
            if on_epoch:
                on_epoch(entry)
            if out is not None:
                model.save(out / f"ckpt-{epoch}", {"epoch": epoch})
                with open(out / "metrics.tsv", "a" if epoch > cfg.eval_every else "w", encoding="utf-8") as fh:
                    fh.write(entry.tsv() + "\n")
            if metrics["R@1"] > best_r1:
                best_r1 = metrics["R@1"]
                result.best = model.copy()
                result.best_epoch = epoch
                if out is not None:
                    model.save(out / "best", {"epoch": epoch})
    return result


# -------------------------------------------------------- link supervision


@dataclass(frozen=True)
class LinkExample:
    """A window of preceding utterances, the current one and its gold parent.

    ``gold_index`` indexes the ``n + 1`` attention positions: ``0..n-1`` are
    context utterances, ``n`` the current utterance itself (thread start).
    """

    context: tuple[Utterance, ...]
    current: Utterance
    gold_index: int

    def __post_init__(self) -> None:
        if not 0 <= self.gold_index <= len(self.context):
            raise DataError(f"gold index {self.gold_index} outside window of {len(self.context)}")


def link_examples(dialogues: Sequence[Dialogue], window: int) -> list[LinkExample]:
    """Supervised windows from gold links.

    Utterances whose gold parents all fall outside the window are skipped;
    with several in-window parents the most recent one is used.
    """
    out = []
    for d in dialogues:
        parents = d.gold_parents()
        for t in range(1, len(d)):
            lo = max(0, t - window)
            ctx = d.utterances[lo:t]
            ps = parents.get(t, set())
            if t in ps:
                out.append(LinkExample(ctx, d.utterances[t], len(ctx)))
                continue
            inside = [p for p in ps if p >= lo]
            if inside:
                out.append(LinkExample(ctx, d.utterances[t], max(inside) - lo))
    return out


def select_fraction(dialogues: Sequence[Dialogue], pct: float) -> list[Dialogue]:
    """The first ``pct`` percent of dialogues in file order (at least one)."""
    if not 0 < pct <= 100:
        raise ValueError("pct must lie in (0, 100]")
    k = max(1, math.ceil(len(dialogues) * pct / 100.0))
    return list(dialogues[:k])


def finetune_links(
    model: Model,
    labeled: Sequence[LinkExample],
    cfg: TrainConfig,
    validate: Callable[[Model], float] | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Extrinsic supervision: cross-entropy between attention and the gold parent position."""
    if not labeled:
        raise DataError("no labeled link examples")
    for ex in labeled:
        if len(ex.context) > model.cfg.max_context:
            raise DataError(f"window of {len(ex.context)} exceeds max_context {model.cfg.max_context}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    usable = [ex for ex in labeled if ex.context]
    rng = np.random.default_rng(cfg.seed)
    names = list(model.trainable())
    opt = Adam(model.trainable(), lr=cfg.learning_rate)
    result = TrainResult(model=model, best=model.copy(), best_epoch=0)
    best = -math.inf
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(usable))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [usable[i] for i in order[start:start + cfg.batch_size]]
            acc = None
            for ex in batch:
                trace = model.forward(ex.context, [ex.current])
                loss, dlog = link_loss(trace.alpha[0], ex.gold_index)
                if not math.isfinite(loss):
                    raise TrainingAborted(f"non-finite link loss at epoch {epoch}", batch)
                total += loss
                acc = _mean_grads(acc, model.backward(trace, d_attn_logits=dlog[None, :]), names)
            if len(batch) > 1:
                for k in names:
                    acc[k] /= len(batch)
            opt.step(acc)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            score = validate(model) if validate else -total
            result.history.append(EpochLog(epoch, total / max(len(usable), 1), 0.0,
                                           {"R@1": float("nan"), "R@5": float("nan"), "MRR": float("nan"),
                                            "val": score}))
            if out is not None:
                model.save(out / f"ckpt-{epoch}", {"epoch": epoch})
            if score > best:
                best = score
                result.best = model.copy()
                result.best_epoch = epoch
                if out is not None:
                    model.save(out / "best", {"epoch": epoch})
    return result
