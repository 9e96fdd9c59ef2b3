import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threadlink.data import Utterance
from threadlink.model import (
    INIT_SCALE,
    CapacityError,
    Model,
    ModelConfig,
    VocabError,
    position_index,
)
from threadlink.numerics import CheckpointError, DimensionError, StateError, grad_check

SMALL = dict(vocab_size=20, embed_dim=6, model_dim=4, n_heads=2, max_context=5,
             attn_mlp_hidden=5, scorer_mlp_hidden=5, ff_hidden=6)


def u(i, *tokens):
    return Utterance(i, "s", tuple(tokens))


def rand_utts(rng, k, vocab=20, start=0):
    return [u(start + i, *rng.integers(0, vocab, size=int(rng.integers(1, 5))).tolist()) for i in range(k)]


# ---------------------------------------------------------------- pair encoder


def test_encode_pair_shape_and_determinism():
    m = Model(ModelConfig(**SMALL))
    a, b = m.encode_pair(u(0, 1, 2), u(1, 3)), m.encode_pair(u(0, 1, 2), u(1, 3))
    assert a.shape == (4,) and np.array_equal(a, b)


def test_encode_pair_zero_tables_give_zero():
    m = Model(ModelConfig(**SMALL))
    for arr in (m.params.tok_emb, m.params.seg_emb, m.params.pair_w, m.params.pair_b, m.params.inter_w):
        arr[...] = 0
    assert not m.encode_pair(u(0, 1, 2), u(1, 3)).any()


def test_out_of_vocab():
    m = Model(ModelConfig(**SMALL))
    with pytest.raises(VocabError):
        m.encode_pair(u(0, 1), u(1, 20))
    with pytest.raises(VocabError):
        m.forward([u(0, 99)], [u(1, 2)])


# --------------------------------------------------------------------- forward


def test_forward_shapes_and_alpha():
    m = Model(ModelConfig(**SMALL))
    rng = np.random.default_rng(0)
    tr = m.forward(rand_utts(rng, 3), rand_utts(rng, 2, start=3))
    assert tr.alpha.shape == (2, 4) and tr.n_context == 3
    assert np.all(np.abs(tr.alpha.sum(axis=1) - 1) <= 1e-12)
    assert np.all((tr.score > 0) & (tr.score < 1))


def test_forward_single_candidate_matches_batch():
    m = Model(ModelConfig(**SMALL))
    rng = np.random.default_rng(1)
    ctx, cands = rand_utts(rng, 4), rand_utts(rng, 3, start=4)
    batch = m.forward(ctx, cands)
    for k, c in enumerate(cands):
        one = m.forward(ctx, c)
        np.testing.assert_allclose(one.score[0], batch.score[k], rtol=0, atol=1e-14)
        np.testing.assert_allclose(one.alpha[0], batch.alpha[k], rtol=0, atol=1e-14)


def test_capacity_and_dimension_errors():
    m = Model(ModelConfig(**SMALL))
    rng = np.random.default_rng(2)
    with pytest.raises(CapacityError):
        m.forward(rand_utts(rng, 6), rand_utts(rng, 1, start=6))
    with pytest.raises(DimensionError):
        m.forward([], rand_utts(rng, 1))
    with pytest.raises(DimensionError):
        m.forward(rand_utts(rng, 2), [])


def test_constant_attention_gives_uniform_alpha():
    m = Model(ModelConfig(**SMALL))
    for w in m.params.attn_mlp.weights:
        w[...] = 0
    m.params.attn_mlp.biases[-1][...] = 0.7
    rng = np.random.default_rng(3)
    tr = m.forward(rand_utts(rng, 4), rand_utts(rng, 2, start=4))
    np.testing.assert_allclose(tr.alpha, 0.2, rtol=0, atol=1e-15)


def test_uniform_pooling_flag():
    m = Model(ModelConfig(**SMALL, uniform_pooling=True))
    rng = np.random.default_rng(4)
    tr = m.forward(rand_utts(rng, 2), rand_utts(rng, 3, start=2))
    assert np.all(tr.alpha == 1 / 3)
    np.testing.assert_allclose(tr.pooled, tr.contextual.mean(axis=1), atol=1e-15)


def test_positions_put_self_pair_first():
    assert position_index(3).tolist() == [3, 2, 1, 0]
    assert position_index(1).tolist() == [1, 0]


# ------------------------------------------------------ straight-line oracle


def _ln(x):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + 1e-5) for v in x]


def _affine(x, w, b):
    return [sum(x[i] * w[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]


def _mlp2(x, mlp):
    w0, w1 = (w.tolist() for w in mlp.weights)
    b0, b1 = (b.tolist() for b in mlp.biases)
    return _affine([math.tanh(v) for v in _affine(x, w0, b0)], w1, b1)


def _unit(v):
    r = math.sqrt(sum(a * a for a in v) + 1e-12)
    return [a / r for a in v]


def straight_line_score(m, context_utt, cand):
    """Independent scalar re-evaluation for n=1, one head, one candidate."""
    p = m.params
    emb = p.tok_emb.tolist()
    seg0, seg1 = p.seg_emb.tolist()
    e = len(seg0)

    def tok_sum(utt):
        return [sum(emb[t][k] for t in utt.tokens) for k in range(e)]

    def phi(left, right):
        sl, sr = tok_sum(left), tok_sum(right)
        nl, nr = len(left.tokens), len(right.tokens)
        mean = [(sl[k] + sr[k] + nl * seg0[k] + nr * seg1[k]) / (nl + nr) for k in range(e)]
        ul, ur = _unit(sl), _unit(sr)
        a = _affine(mean, p.pair_w.tolist(), p.pair_b.tolist())
        prod = [m.cfg.overlap_scale * ul[k] * ur[k] for k in range(e)]
        b = _affine(prod, p.inter_w.tolist(), [sum(prod) * c for c in p.inter_c])
        return [x + y for x, y in zip(a, b)]

    pos = p.pos_emb.tolist()
    rows = [phi(context_utt, cand), phi(cand, cand)]
    x = [[v + w for v, w in zip(rows[0], pos[1])], [v + w for v, w in zip(rows[1], pos[0])]]
    psi = p.psi
    h1 = [[g * v + b for v, g, b in zip(_ln(r), psi.ln1_g, psi.ln1_b)] for r in x]
    q = [_affine(r, psi.wq.tolist(), psi.bq.tolist()) for r in h1]
    k = [_affine(r, psi.wk.tolist(), psi.bk.tolist()) for r in h1]
    v = [_affine(r, psi.wv.tolist(), psi.bv.tolist()) for r in h1]
    d = len(q[0])
    out = []
    for i in range(2):
        scores = [sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d) for j in range(2)]
        ex = [math.exp(s - max(scores)) for s in scores]
        att = [s / sum(ex) for s in ex]
        o = [att[0] * v[0][c] + att[1] * v[1][c] for c in range(d)]
        x1 = [a + b for a, b in zip(x[i], _affine(o, psi.wo.tolist(), psi.bo.tolist()))]
        h2 = [g * val + b for val, g, b in zip(_ln(x1), psi.ln2_g, psi.ln2_b)]
        y = [a + b for a, b in zip(x1, _mlp2(h2, psi.ff))]
        out.append([g * val + b for val, g, b in zip(_ln(y), p.out_g, p.out_b)])
    logits = [_mlp2(r, p.attn_mlp)[0] for r in out]
    ex = [math.exp(s - max(logits)) for s in logits]
    alpha = [s / sum(ex) for s in ex]
    pooled = [alpha[0] * out[0][c] + alpha[1] * out[1][c] for c in range(d)]
    z = _mlp2(pooled, p.scorer)[0]
    return 1 / (1 + math.exp(-z)), alpha


def test_tiny_model_matches_straight_line():
    cfg = ModelConfig(vocab_size=5, embed_dim=2, model_dim=2, n_heads=1, max_context=1,
                      attn_mlp_hidden=2, scorer_mlp_hidden=2, ff_hidden=2)
    m = Model(cfg)
    rng = np.random.default_rng(42)
    for arr in m.arrays().values():
        arr[...] = rng.uniform(-1, 1, size=arr.shape)
    ctx, cand = u(0, 1, 3), u(1, 3, 4, 4)
    s, alpha = straight_line_score(m, ctx, cand)
    tr = m.forward([ctx], cand)
    assert abs(tr.score[0] - s) < 1e-10
    np.testing.assert_allclose(tr.alpha[0], alpha, rtol=0, atol=1e-10)


# ------------------------------------------------------------------ properties


@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
@settings(max_examples=40, deadline=None)
def test_alpha_is_distribution(seed, n):
    m = Model(ModelConfig(**SMALL, seed=seed % 1000))
    rng = np.random.default_rng(seed)
    tr = m.forward(rand_utts(rng, n), rand_utts(rng, 3, start=n))
    assert np.all(tr.alpha >= 0) and np.all(np.abs(tr.alpha.sum(axis=1) - 1) <= 1e-12)
    assert np.all(np.isfinite(tr.score)) and np.all((tr.score > 0) & (tr.score < 1))


@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
@settings(max_examples=30, deadline=None)
def test_context_permutation_with_zero_positions(seed, n):
    m = Model(ModelConfig(**SMALL))
    m.params.pos_emb[...] = 0
    rng = np.random.default_rng(seed)
    ctx, cand = rand_utts(rng, n), rand_utts(rng, 1, start=n)
    perm = rng.permutation(n)
    a = m.forward(ctx, cand)
    b = m.forward([ctx[i] for i in perm], cand)
    np.testing.assert_allclose(b.alpha[0, :n], a.alpha[0, perm], atol=1e-12)
    np.testing.assert_allclose(b.score, a.score, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
@settings(max_examples=30, deadline=None)
def test_context_swap_needs_position_swap(seed, n):
    m = Model(ModelConfig(**SMALL))
    rng = np.random.default_rng(seed)
    m.params.pos_emb[...] = rng.uniform(-1, 1, size=m.params.pos_emb.shape)
    ctx, cand = rand_utts(rng, n), rand_utts(rng, 1, start=n)
    i, j = sorted(rng.choice(n, size=2, replace=False))
    swapped = list(ctx)
    swapped[i], swapped[j] = ctx[j], ctx[i]
    a = m.forward(ctx, cand).alpha[0]
    # swapping the utterances alone generally changes the weights
    b = m.forward(swapped, cand).alpha[0]
    expected = a.copy()
    expected[[i, j]] = a[[j, i]]
    if ctx[i].tokens != ctx[j].tokens:
        assert not np.allclose(b, expected, atol=1e-9)
    # swapping their position embeddings too restores equivariance
    pi, pj = position_index(n)[[i, j]]
    m.params.pos_emb[[pi, pj]] = m.params.pos_emb[[pj, pi]]
    c = m.forward(swapped, cand).alpha[0]
    np.testing.assert_allclose(c, expected, atol=1e-12)


# --------------------------------------------------------------- init & io


def test_init_contract():
    a, b = Model(ModelConfig(**SMALL, seed=1)), Model(ModelConfig(**SMALL, seed=1))
    c = Model(ModelConfig(**SMALL, seed=2))
    for name, arr in a.arrays().items():
        assert np.array_equal(arr, b.arrays()[name])
        if name.endswith(("_g", "ln1_g", "ln2_g")):
            assert np.all(arr == 1)  # layer-norm gains start at one
        else:
            assert np.all(np.abs(arr) <= INIT_SCALE)
    assert not np.array_equal(a.params.tok_emb, c.params.tok_emb)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(model_dim=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(max_context=0)
    with pytest.raises(ValueError):
        ModelConfig(overlap_scale=-1.0)


def test_checkpoint_roundtrip_and_mismatch(tmp_path):
    m = Model(ModelConfig(**SMALL, seed=3))
    path = tmp_path / "m.npz"
    m.save(path)
    back = Model.load(path, expect=m.cfg)
    for k, v in m.arrays().items():
        assert np.array_equal(v, back.arrays()[k])
    with pytest.raises(CheckpointError):
        Model.load(path, expect=ModelConfig(**SMALL, seed=4))


def test_copy_is_independent():
    m = Model(ModelConfig(**SMALL))
    c = m.copy()
    c.params.pair_w[0, 0] += 1
    assert m.params.pair_w[0, 0] != c.params.pair_w[0, 0]


def test_wide_copy_keeps_its_precision():
    m = Model(ModelConfig(**SMALL))
    wide = m.astype(np.longdouble)
    assert all(a.dtype == np.longdouble for a in wide.arrays().values())
    assert all(np.array_equal(a, wide.arrays()[k]) for k, a in m.arrays().items())
    ctx, cands = [u(0, 1, 2), u(1, 3)], [u(2, 4), u(3, 1, 5)]
    narrow, t = m.forward(ctx, cands), wide.forward(ctx, cands)
    assert t.alpha.dtype == t.score.dtype == np.longdouble
    np.testing.assert_allclose(t.score.astype(np.float64), narrow.score, rtol=1e-13)
    wide.params.pair_w[0, 0] += 1
    assert m.params.pair_w[0, 0] != wide.params.pair_w[0, 0]


# ------------------------------------------------------------------- backward


def test_stale_trace_rejected():
    m = Model(ModelConfig(**SMALL))
    rng = np.random.default_rng(5)
    tr = m.forward(rand_utts(rng, 2), rand_utts(rng, 2, start=2))
    with pytest.raises(StateError):
        m.copy().backward(tr, d_logit=np.ones(2))


@pytest.mark.parametrize("uniform", [False, True])
def test_model_gradient_matches_differences(uniform):
    m = Model(ModelConfig(**SMALL, uniform_pooling=uniform))
    rng = np.random.default_rng(6)
    for arr in m.arrays().values():
        arr += rng.normal(scale=0.3, size=arr.shape)
    ctx, cands = rand_utts(rng, 3), rand_utts(rng, 3, start=3)
    up_logit, up_alpha, up_attn = rng.normal(size=3), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))

    def f(_):
        tr = m.forward(ctx, cands)
        val = float(up_logit @ tr.logit + (up_alpha * tr.alpha).sum() + (up_attn * tr.attn_logits).sum())
        return val, m.backward(tr, up_logit, up_alpha, None if uniform else up_attn, token_grads=True)

    arrays = m.arrays()
    coords = {k: rng.choice(a.size, size=min(a.size, 6), replace=False) for k, a in arrays.items()}
    coords["psi.bk"] = []  # shared key bias cancels in softmax; gradient is identically zero
    assert grad_check(f, arrays, coords=coords) < 1e-5
