import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threadlink.data import Dialogue, ReplyLink, Utterance
from threadlink.disentangler import DisentangleConfig, disentangle, predict_link
from threadlink.model import Model, ModelConfig
from threadlink.synthgen import GenConfig, generate_dialogue

SMALL = ModelConfig(vocab_size=60, embed_dim=8, model_dim=8, n_heads=2, max_context=8,
                    attn_mlp_hidden=6, scorer_mlp_hidden=6, ff_hidden=8)


class StubModel:
    """Returns a fixed attention pattern chosen by ``pick(n)`` over n+1 positions."""

    def __init__(self, pick, max_context=8):
        self.pick = pick
        self.cfg = ModelConfig(max_context=max_context)
        self.calls = []

    def forward(self, context, candidates):
        n = len(context)
        self.calls.append((tuple(u.id for u in context), candidates[0].id))
        alpha = np.full((1, n + 1), 0.1)
        alpha[0, self.pick(n)] = 1.0
        return type("Trace", (), {"alpha": alpha / alpha.sum()})


def dialogue(n):
    return Dialogue(tuple(Utterance(i, "s", (i + 1,)) for i in range(n)))


def test_empty_context_is_self_link():
    stub = StubModel(lambda n: 0)
    assert predict_link(stub, [], Utterance(0, "s", (1,))) == ReplyLink(0, 0)
    assert stub.calls == []


def test_one_hot_position_two_of_four():
    ctx = [Utterance(i, "s", (1,)) for i in range(10, 13)]
    link = predict_link(StubModel(lambda n: 1), ctx, Utterance(13, "s", (2,)))
    assert link == ReplyLink(13, 11)  # second of four positions is context utterance id 11


def test_ties_go_to_lowest_index():
    class Flat(StubModel):
        def forward(self, context, candidates):
            return type("Trace", (), {"alpha": np.full((1, len(context) + 1), 1 / (len(context) + 1))})

    ctx = [Utterance(i, "s", (1,)) for i in range(3)]
    assert predict_link(Flat(None), ctx, Utterance(3, "s", (1,))) == ReplyLink(3, 0)


def test_single_utterance_dialogue():
    links, part = disentangle(StubModel(lambda n: 0), dialogue(1))
    assert links == [ReplyLink(0, 0)] and part.sorted_clusters() == [[0]]


def test_always_self_gives_singletons():
    links, part = disentangle(StubModel(lambda n: n), dialogue(6))
    assert all(l.is_self for l in links)
    assert part.sorted_clusters() == [[i] for i in range(6)]


def test_always_previous_gives_one_chain():
    links, part = disentangle(StubModel(lambda n: n - 1), dialogue(6))
    assert links[1:] == [ReplyLink(i, i - 1) for i in range(1, 6)]
    assert part.sorted_clusters() == [list(range(6))]


def test_window_limits_context():
    stub = StubModel(lambda n: 0)
    disentangle(stub, dialogue(6), DisentangleConfig(window=2))
    assert [c for c, _ in stub.calls] == [(0,), (0, 1), (1, 2), (2, 3), (3, 4)]


def test_config_errors():
    with pytest.raises(ValueError):
        DisentangleConfig(window=0)
    with pytest.raises(ValueError):
        disentangle(StubModel(lambda n: 0, max_context=4), dialogue(3), DisentangleConfig(window=8))
    with pytest.raises(ValueError):
        disentangle(StubModel(lambda n: 0), Dialogue(()))


@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
@settings(max_examples=25, deadline=None)
def test_output_invariants(seed, window):
    model = Model(SMALL)
    d = generate_dialogue(GenConfig(vocab_size=60, topic_tokens_per_thread=4, utterances_per_thread=(1, 5),
                                    seed=seed))
    links, part = disentangle(model, d, DisentangleConfig(window=window))
    assert len(links) == len(d)
    assert [l.child for l in links] == list(range(len(d)))
    assert all(0 <= l.child - l.parent <= window for l in links)
    assert part.elements == frozenset(range(len(d)))
    assert sum(len(c) for c in part.clusters) == len(d)
    # gold links are never consulted
    assert disentangle(model, d.without_links(), DisentangleConfig(window=window))[0] == links
