"""Hierarchical context/candidate scorer.

For a context ``U_1..U_n`` and candidate ``C`` the model builds one row per
(context utterance, candidate) pair plus a final (candidate, candidate)
self-pair row, contextualises the rows with one transformer layer, attends
over them with a small MLP and scores the attention-pooled vector.

The pair encoder is a desk-sized stand-in for a pretrained sentence-pair
encoder: the mean of token embeddings over the concatenated pair (with
context/candidate segment embeddings) projected to ``model_dim``, plus two
overlap features: a projection of the elementwise product of the two sides'
unit-normalised embedding sums, and a learned direction scaled by their
cosine. Both are multiplied by ``overlap_scale`` so that lexical overlap is
visible to the attention module from the start of training.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Utterance
from .numerics import (
    CheckpointError,
    DimensionError,
    MlpParams,
    StateError,
    TransformerLayerParams,
    as_float,
    cast_arrays,
    layer_norm_backward,
    layer_norm_forward,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
    softmax,
    softmax_backward,
    transformer_layer_backward,
    transformer_layer_forward,
)

INIT_SCALE = 0.08
_NORM_EPS = 1e-12


class VocabError(ValueError):
    pass


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 1000
    embed_dim: int = 64
    model_dim: int = 32
    n_heads: int = 4
    max_context: int = 8
    attn_mlp_hidden: int = 32
    scorer_mlp_hidden: int = 32
    ff_hidden: int = 64
    seed: int = 0
    # ablation: replace the attention module by uniform pooling
    uniform_pooling: bool = False
    # token embeddings stay at their random init unless enabled
    train_token_embeddings: bool = False
    final_norm: bool = True
    # multiplies the overlap features so they dominate the row vectors from the first step
    overlap_scale: float = 8.0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "embed_dim", "model_dim", "n_heads", "max_context",
                     "attn_mlp_hidden", "scorer_mlp_hidden", "ff_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.overlap_scale >= 0:
            raise ValueError("overlap_scale must be non-negative")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


@dataclass
class ModelParams:
    tok_emb: np.ndarray  # (vocab, embed)
    seg_emb: np.ndarray  # (2, embed): row 0 context side, row 1 candidate side
    pos_emb: np.ndarray  # (max_context + 1, model_dim)
    pair_w: np.ndarray  # (embed, model_dim)
    pair_b: np.ndarray  # (model_dim,)
    inter_w: np.ndarray  # (embed, model_dim)
    inter_c: np.ndarray  # (model_dim,) direction scaled by the pair's cosine similarity
    psi: TransformerLayerParams
    out_g: np.ndarray  # (model_dim,) layer norm applied to the output of psi
    out_b: np.ndarray
    attn_mlp: MlpParams
    scorer: MlpParams

    def arrays(self) -> dict[str, np.ndarray]:
        out = {n: getattr(self, n) for n in ("tok_emb", "seg_emb", "pos_emb", "pair_w", "pair_b", "inter_w", "inter_c",
                                                  "out_g", "out_b")}
        for prefix in ("psi", "attn_mlp", "scorer"):
            out.update({f"{prefix}.{k}": v for k, v in getattr(self, prefix).arrays().items()})
        return out


def _mlp(rng, dims: Sequence[int], act: str) -> MlpParams:
    ws = [rng.uniform(-INIT_SCALE, INIT_SCALE, size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(b) for b in dims[1:]]
    return MlpParams(ws, bs, [act] * (len(dims) - 2))


def init_params(cfg: ModelConfig) -> ModelParams:
    """Uniform(-0.08, 0.08) embeddings and weight matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(cfg.seed)
    u = lambda *shape: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)  # noqa: E731
    d = cfg.model_dim
    tok = u(cfg.vocab_size, cfg.embed_dim)
    seg = u(2, cfg.embed_dim)
    pos = u(cfg.max_context + 1, d)
    pair_w, inter_w = u(cfg.embed_dim, d), u(cfg.embed_dim, d)
    psi = TransformerLayerParams(
        n_heads=cfg.n_heads,
        wq=u(d, d), bq=np.zeros(d), wk=u(d, d), bk=np.zeros(d),
        wv=u(d, d), bv=np.zeros(d), wo=u(d, d), bo=np.zeros(d),
        ln1_g=np.ones(d), ln1_b=np.zeros(d), ln2_g=np.ones(d), ln2_b=np.zeros(d),
        ff=_mlp(rng, [d, cfg.ff_hidden, d], "tanh"),
    )
    return ModelParams(
        tok_emb=tok, seg_emb=seg, pos_emb=pos, pair_w=pair_w, pair_b=np.zeros(d), inter_w=inter_w,
        psi=psi, out_g=np.ones(d), out_b=np.zeros(d),
        attn_mlp=_mlp(rng, [d, cfg.attn_mlp_hidden, 1], "tanh"),
        scorer=_mlp(rng, [d, cfg.scorer_mlp_hidden, 1], "tanh"),
        inter_c=u(d),
    )


@dataclass
class ForwardTrace:
    """Everything one forward pass produced; leading axis indexes candidates."""

    pairs: np.ndarray  # V, (m, n+1, model_dim) before position embeddings
    contextual: np.ndarray  # V'
    attn_logits: np.ndarray  # v, (m, n+1)
    alpha: np.ndarray  # (m, n+1); last column is the self-pair
    pooled: np.ndarray  # (m, model_dim)
    logit: np.ndarray  # scorer output before the logistic map, (m,)
    score: np.ndarray  # s in (0, 1), (m,)
    cache: dict | None = None

    @property
    def n_context(self) -> int:
        return self.alpha.shape[-1] - 1


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = as_float(z)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def _unit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt((x * x).sum(axis=-1, keepdims=True) + _NORM_EPS)
    return x / r, r


def _unit_backward(u: np.ndarray, r: np.ndarray, du: np.ndarray) -> np.ndarray:
    return (du - u * (u * du).sum(axis=-1, keepdims=True)) / r


def position_index(n: int) -> np.ndarray:
    """Position ids for rows ``[U_1..U_n, self]``: the self-pair is 0, the newest context row 1."""
    return np.arange(n, -1, -1)


class Model:
    def __init__(self, cfg: ModelConfig, params: ModelParams | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)

    # -- parameters ---------------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        return self.params.arrays()

    def trainable(self) -> dict[str, np.ndarray]:
        arrays = self.arrays()
        if not self.cfg.train_token_embeddings:
            arrays.pop("tok_emb")
        return arrays

    def copy(self) -> Model:
        clone = Model(self.cfg, init_params(self.cfg))
        dst = clone.arrays()
        for k, v in self.arrays().items():
            dst[k][...] = v
        return clone

    def astype(self, dtype) -> Model:
        """Independent copy whose parameters are stored as ``dtype``."""
        return Model(self.cfg, cast_arrays(self.params, dtype))

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        save_checkpoint(path, self.arrays(), {"model_config": self.cfg.to_dict(), **(extra or {})})

    @classmethod
    def load(cls, path: str | Path, expect: ModelConfig | None = None) -> Model:
        arrays, meta = load_checkpoint(path)
        if "model_config" not in meta:
            raise CheckpointError(f"{path}: no model_config in checkpoint")
        cfg = ModelConfig.from_dict(meta["model_config"])
        if expect is not None and expect != cfg:
            raise CheckpointError(f"{path}: checkpoint config {cfg} does not match {expect}")
        model = cls(cfg)
        dst = model.arrays()
        if set(arrays) != set(dst):
            raise CheckpointError(f"{path}: tensor names do not match the model")
        for name, arr in arrays.items():
            if arr.shape != dst[name].shape:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {dst[name].shape}")
            dst[name][...] = arr
        return model

    # -- forward ------------------------------------------------------------

    def _sums(self, utts: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        toks = np.fromiter((t for u in utts for t in u.tokens), dtype=np.int64)
        lens = np.array([len(u.tokens) for u in utts])
        if toks.size and (toks.max() >= self.cfg.vocab_size or toks.min() < 0):
            bad = int(toks[(toks >= self.cfg.vocab_size) | (toks < 0)][0])
            raise VocabError(f"token id {bad} outside vocabulary of {self.cfg.vocab_size}")
        starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
        sums = np.add.reduceat(self.params.tok_emb[toks], starts, axis=0)
        return sums, lens.astype(np.float64), toks

    def _pair_rows(self, su, nu, sc, nc):
        """Pair vectors for context sums ``su`` (..., E) against candidate sums ``sc``."""
        p = self.params
        tot = (nu + nc)[..., None]
        mean = (su + sc + nu[..., None] * p.seg_emb[0] + nc[..., None] * p.seg_emb[1]) / tot
        uu, ru = _unit(su)
        uc, rc = _unit(sc)
        prod = self.cfg.overlap_scale * uu * uc
        cos = prod.sum(axis=-1, keepdims=True)
        v = mean @ p.pair_w + p.pair_b + prod @ p.inter_w + cos * p.inter_c
        return v, (tot, mean, uu, ru, uc, rc, prod, cos)

    def encode_pair(self, context_utt: Utterance, candidate: Utterance) -> np.ndarray:
        sums, lens, _ = self._sums([context_utt, candidate])
        v, _ = self._pair_rows(sums[0], lens[0], sums[1], lens[1])
        return v

    def forward(self, context: Sequence[Utterance], candidates: Utterance | Sequence[Utterance]) -> ForwardTrace:
        """Score every candidate against ``context``; one forward over all candidates."""
        if isinstance(candidates, Utterance):
            candidates = [candidates]
        n, m = len(context), len(candidates)
        if n == 0:
            raise DimensionError("context must contain at least one utterance")
        if n > self.cfg.max_context:
            raise CapacityError(f"context of {n} exceeds max_context {self.cfg.max_context}")
        if m == 0:
            raise DimensionError("no candidates")
        p = self.params
        sums, lens, toks = self._sums(list(context) + list(candidates))
        s_ctx, n_ctx = sums[:n], lens[:n]
        s_cand, n_cand = sums[n:], lens[n:]

        # rows: U_1..U_n then the candidate itself in the context role
        su = np.concatenate([np.broadcast_to(s_ctx, (m, n, s_ctx.shape[1])), s_cand[:, None, :]], axis=1)
        nu = np.concatenate([np.broadcast_to(n_ctx, (m, n)), n_cand[:, None]], axis=1)
        sc = s_cand[:, None, :]
        nc = n_cand[:, None]
        pairs, pair_cache = self._pair_rows(su, nu, sc, nc)

        pos_idx = position_index(n)
        x = pairs + p.pos_emb[pos_idx]
        xp, psi_cache = transformer_layer_forward(p.psi, x)
        out_cache = None
        if self.cfg.final_norm:
            xp, out_cache = layer_norm_forward(xp, p.out_g, p.out_b)
        if self.cfg.uniform_pooling:
            logits = np.zeros(xp.shape[:-1])
            attn_cache = None
            alpha = np.full(logits.shape, 1.0 / (n + 1))
        else:
            out, attn_cache = mlp_forward(p.attn_mlp, xp)
            logits = out[..., 0]
            alpha = softmax(logits, axis=-1)
        pooled = (alpha[..., None] * xp).sum(axis=-2)
        z, scorer_cache = mlp_forward(p.scorer, pooled)
        z = z[..., 0]
        cache = dict(
            params=p, n=n, lens=lens, toks=toks, pair=pair_cache, pos_idx=pos_idx, psi=psi_cache,
            attn=attn_cache, scorer=scorer_cache, out=out_cache,
        )
        return ForwardTrace(pairs, xp, logits, alpha, pooled, z, sigmoid(z), cache)

    # -- backward -----------------------------------------------------------

    def backward(
        self,
        trace: ForwardTrace,
        d_logit: np.ndarray | None = None,
        d_alpha: np.ndarray | None = None,
        d_attn_logits: np.ndarray | None = None,
        token_grads: bool | None = None,
    ) -> dict[str, np.ndarray]:
        """Gradients of a loss given its derivatives w.r.t. the scorer logit,
        the attention weights and/or the attention logits.

        Returns a dict keyed like :meth:`arrays`. The token-embedding gradient
        is only accumulated when ``token_grads`` (default: whether the table
        is trained) is set; otherwise it is left at zero.
        """
        c = trace.cache
        p = self.params
        if c is None or c["params"] is not p:
            raise StateError("trace was not produced by this model's current parameters")
        m, t, d = trace.contextual.shape
        n = c["n"]
        grads = {k: np.zeros_like(v) for k, v in self.arrays().items()}

        dxp = np.zeros_like(trace.contextual)
        dalpha = np.zeros_like(trace.alpha) if d_alpha is None else np.array(d_alpha, dtype=np.float64)
        if d_logit is not None:
            g, dpooled = mlp_backward(p.scorer, np.asarray(d_logit, dtype=np.float64)[..., None], c["scorer"])
            _put(grads, "scorer", g)
            dxp += trace.alpha[..., None] * dpooled[:, None, :]
            dalpha += (trace.contextual * dpooled[:, None, :]).sum(axis=-1)
        if not self.cfg.uniform_pooling:
            dlog = softmax_backward(trace.alpha, dalpha)
            if d_attn_logits is not None:
                dlog = dlog + d_attn_logits
            g, dx_attn = mlp_backward(p.attn_mlp, dlog[..., None], c["attn"])
            _put(grads, "attn_mlp", g)
            dxp += dx_attn

        if c["out"] is not None:
            dxp, grads["out_g"], grads["out_b"] = layer_norm_backward(dxp, c["out"])
        g, dx = transformer_layer_backward(p.psi, dxp, c["psi"])
        _put(grads, "psi", g)
        np.add.at(grads["pos_emb"], c["pos_idx"], dx.sum(axis=0))

        tot, mean, uu, ru, uc, rc, prod, cos = c["pair"]
        grads["pair_w"] += mean.reshape(-1, mean.shape[-1]).T @ dx.reshape(-1, d)
        grads["pair_b"] += dx.reshape(-1, d).sum(axis=0)
        grads["inter_w"] += prod.reshape(-1, prod.shape[-1]).T @ dx.reshape(-1, d)
        dmean = (dx @ p.pair_w.T) / tot
        grads["inter_c"] += (dx * cos).reshape(-1, d).sum(axis=0)
        dprod = dx @ p.inter_w.T + dx @ p.inter_c[:, None]
        lens = c["lens"]
        nu = np.concatenate([np.broadcast_to(lens[:n], (m, n)), lens[n:, None]], axis=1)
        nc = lens[n:, None]
        grads["seg_emb"][0] += (dmean * nu[..., None]).reshape(-1, dmean.shape[-1]).sum(axis=0)
        grads["seg_emb"][1] += (dmean * nc[..., None]).reshape(-1, dmean.shape[-1]).sum(axis=0)

        if token_grads is None:
            token_grads = self.cfg.train_token_embeddings
        if token_grads:
            dprod = self.cfg.overlap_scale * dprod
            dsu = dmean + _unit_backward(uu, ru, dprod * uc)
            dsc = dmean.sum(axis=1) + _unit_backward(uc, rc, dprod * uu).sum(axis=1)
            dsums = np.concatenate([dsu[:, :n].sum(axis=0), dsu[:, n] + dsc], axis=0)
            np.add.at(grads["tok_emb"], c["toks"], np.repeat(dsums, lens.astype(np.int64), axis=0))
        return grads


def _put(grads: dict, prefix: str, local: dict) -> None:
    for k, v in local.items():
        grads[f"{prefix}.{k}"] += v
