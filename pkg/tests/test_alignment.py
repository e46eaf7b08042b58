import math

import numpy as np
import pytest

from pointprompt.alignment import (
    AlignmentHead,
    TextEmbeddingTable,
    cross_entropy,
    hash_embedding,
    template_expand,
    write_embedding_file,
)
from pointprompt.data import CategorySpace, build_unified_label_space
from pointprompt.errors import ConfigError, DataError, ParseError, UnknownDomainError
from pointprompt.params import ParamStore
from pointprompt.tensor import MASK_SENTINEL, Tape, Tensor

SPACES = [CategorySpace(("floor", "wall", "chair")), CategorySpace(("wall", "table"))]
UNIFIED = build_unified_label_space(SPACES)


def head(kind, seed=0, **kw):
    text = TextEmbeddingTable.from_hash(UNIFIED.names, 5) if kind == "language_guided" else None
    return AlignmentHead(ParamStore(seed), kind, 4, UNIFIED, ["a", "b"], text=text, **kw)


def emb(n=6, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(n, 4)))


# ---------------------------------------------------------------- templates and text


def test_template_expansion():
    assert template_expand("chair", "A point of [class].") == "A point of chair."
    assert template_expand("chair") == "chair"
    with pytest.raises(ConfigError, match="placeholder"):
        template_expand("chair", "A point of a thing.")


def test_hash_embedding_is_deterministic_unit_and_name_specific():
    a, b = hash_embedding("chair", 64), hash_embedding("chair", 64)
    assert a.tobytes() == b.tobytes()
    assert abs(np.linalg.norm(a) - 1.0) < 1e-12
    assert not np.allclose(a, hash_embedding("A point of chair.", 64))


def test_embedding_file_round_trip_and_errors(tmp_path):
    table = TextEmbeddingTable.from_hash(UNIFIED.names, 5)
    path = write_embedding_file(table, tmp_path / "emb.tsv")
    back = TextEmbeddingTable.from_file(path, UNIFIED.names)
    np.testing.assert_allclose(back.vectors, table.vectors, atol=1e-15)
    assert back.provider == "file"

    (tmp_path / "scaled.tsv").write_text("wall\t3 4\nfloor\t0 2\n")
    t = TextEmbeddingTable.from_file(tmp_path / "scaled.tsv", ["wall", "floor"])
    np.testing.assert_allclose(t.vectors, [[0.6, 0.8], [0.0, 1.0]])

    (tmp_path / "dup.tsv").write_text("wall\t1 0\nwall\t0 1\n")
    with pytest.raises(DataError, match="duplicate"):
        TextEmbeddingTable.from_file(tmp_path / "dup.tsv", ["wall"])
    with pytest.raises(DataError, match="no embedding"):
        TextEmbeddingTable.from_file(tmp_path / "scaled.tsv", ["wall", "sofa"])
    (tmp_path / "bad.tsv").write_text("wall 1 0\n")
    with pytest.raises(ParseError):
        TextEmbeddingTable.from_file(tmp_path / "bad.tsv", ["wall"])


# ---------------------------------------------------------------- logits


def test_language_guided_logit_is_the_scale_for_a_matching_embedding():
    h = head("language_guided")
    h.weight.data[...] = 0.0
    h.bias.data[...] = h.text.vectors[UNIFIED.names.index("chair")] * 3.0
    logits, _ = h.logits(emb(1), "a")
    assert abs(logits.data[0, UNIFIED.names.index("chair")] - 100.0) <= 1e-9


def test_language_guided_logits_are_bounded():
    h = head("language_guided")
    logits, active = h.logits(emb(20), "a")
    assert np.abs(logits.data[:, active]).max() <= 100.0 + 1e-12


def test_masking_and_widths():
    for kind in ("unionized", "language_guided"):
        logits, active = head(kind).logits(emb(), "b")
        assert logits.shape == (6, 4)
        outside = ~UNIFIED.masks[1]
        assert np.all(logits.data[:, outside] == MASK_SENTINEL)
        assert active.tolist() == [1, 3]
    logits, active = head("decoupled").logits(emb(), "b")
    assert logits.shape == (6, 2) and active.tolist() == [0, 1]


def test_unknown_domain_and_bad_labels():
    h = head("unionized")
    with pytest.raises(UnknownDomainError):
        h.logits(emb(), "c")
    with pytest.raises(UnknownDomainError):
        h.logits(emb(), 5)
    with pytest.raises(DataError):
        h.loss(emb(2), [0, 2], "b")


def test_l2_needs_language_guided_head():
    with pytest.raises(ConfigError):
        head("unionized").loss(emb(2), [0, 1], "a", "l2")
    with pytest.raises(ConfigError):
        head("unionized").loss(emb(2), [0, 1], "a", "hinge")


def test_l2_loss_hand_value():
    h = head("language_guided")
    h.weight.data[...] = 0.0
    h.bias.data[...] = h.text.vectors[UNIFIED.names.index("wall")]
    # wall predicted for a wall point (0) and a floor point (2 - 2cos)
    cos = float(h.text.vectors[UNIFIED.names.index("wall")] @ h.text.vectors[UNIFIED.names.index("floor")])
    loss = h.loss(emb(2), [1, 0], "a", "l2")
    assert abs(loss.item() - (2 - 2 * cos) / 2) < 1e-12


# ---------------------------------------------------------------- losses


def test_uniform_logits_give_log_k():
    h = head("unionized")
    h.weight.data[...] = 0.0
    assert abs(h.loss(emb(5), [0, 1, 2, 0, 1], "a").item() - math.log(3)) < 1e-12
    assert abs(h.loss(emb(5), [0, 1, 1, 0, 1], "b").item() - math.log(2)) < 1e-12


def test_saturated_logits_give_tiny_loss():
    logits = Tensor([[100.0, MASK_SENTINEL, MASK_SENTINEL]])
    assert cross_entropy(logits, [0]).item() < 1e-6


@pytest.mark.parametrize("kind", ["unionized", "language_guided"])
def test_out_of_domain_columns_never_matter(kind):
    h = head(kind)
    e, labels = emb(8), np.array([0, 1, 0, 1, 1, 0, 0, 1])
    with Tape() as tape:
        loss = h.loss(e, labels, "b")
    tape.backward(loss)
    pred = h.predict(e, "b")
    outside = np.flatnonzero(~UNIFIED.masks[1])
    if kind == "unionized":
        assert np.all(h.weight.grad[:, outside] == 0.0) and np.all(h.bias.grad[outside] == 0.0)
        h.weight.data[:, outside] += 1e3
        h.bias.data[outside] -= 7.0
    else:
        vecs = h.text.vectors.copy()
        vecs[outside] = np.random.default_rng(1).normal(size=(len(outside), 5))
        h.text = TextEmbeddingTable(h.text.names, vecs)
    assert h.loss(e, labels, "b").item() == loss.item()
    assert np.array_equal(h.predict(e, "b"), pred)


def test_text_embeddings_are_a_frozen_buffer():
    store = ParamStore()
    text = TextEmbeddingTable.from_hash(UNIFIED.names, 5)
    AlignmentHead(store, "language_guided", 4, UNIFIED, ["a", "b"], text=text)
    assert store.group_of("head.text_embeddings") == "buffer"
    assert "head.text_embeddings" not in dict(store.named_parameters())
    assert not text.vectors.flags.writeable


def test_unionized_equals_decoupled_for_disjoint_spaces():
    spaces = [CategorySpace(("floor", "wall")), CategorySpace(("bed", "sofa", "desk"))]
    uni = build_unified_label_space(spaces)
    dec = AlignmentHead(ParamStore(1), "decoupled", 4, uni, ["a", "b"])
    un = AlignmentHead(ParamStore(2), "unionized", 4, uni, ["a", "b"])
    for d, (w, b) in enumerate(dec.heads):
        cols = uni.maps[d]
        w.data[...] = un.weight.data[:, cols]
        b.data[...] = np.random.default_rng(d).normal(size=len(cols))
        un.bias.data[cols] = b.data
    e = emb(7)
    for d, labels in enumerate(([0, 1, 1, 0, 1, 0, 0], [2, 1, 0, 0, 2, 1, 2])):
        assert dec.loss(e, labels, d).item() == un.loss(e, labels, d).item()
        assert np.array_equal(dec.predict(e, d), un.predict(e, d))


def test_predict_invariances():
    h = head("language_guided")
    e = emb(12)
    pred = h.predict(e, "a")
    assert pred.min() >= 0 and pred.max() < 3
    h.logit_scale = 3.7
    assert np.array_equal(h.predict(e, "a"), pred)
    u = head("unionized")
    p = u.predict(e, "a")
    u.bias.data += 5.0
    assert np.array_equal(u.predict(e, "a"), p)


def test_single_category_domain_predicts_constant():
    spaces = [CategorySpace(("floor",)), CategorySpace(("wall", "floor"))]
    uni = build_unified_label_space(spaces)
    h = AlignmentHead(ParamStore(), "unionized", 4, uni, ["a", "b"])
    assert np.all(h.predict(emb(9), "a") == 0)


def test_head_construction_errors():
    with pytest.raises(ConfigError):
        AlignmentHead(ParamStore(), "mlp", 4, UNIFIED, ["a", "b"])
    with pytest.raises(ConfigError):
        AlignmentHead(ParamStore(), "language_guided", 4, UNIFIED, ["a", "b"])
    with pytest.raises(ConfigError):
        head("unionized", logit_scale=0.0)
    wrong = TextEmbeddingTable.from_hash(("x", "y"), 5)
    with pytest.raises(ConfigError):
        AlignmentHead(ParamStore(), "language_guided", 4, UNIFIED, ["a", "b"], text=wrong)


def test_loss_gradients():
    from pointprompt.tensor import check_gradients

    for kind in ("decoupled", "unionized", "language_guided"):
        h = head(kind, seed=3)
        e = emb(5, 2)
        params = [e] + ([p for pair in h.heads for p in pair] if kind == "decoupled" else [h.weight, h.bias])
        for crit in ("infonce_ce", "l2") if kind == "language_guided" else ("infonce_ce",):
            assert check_gradients(lambda *_: h.loss(e, [0, 2, 1, 1, 0], "a", crit), params) < 1e-5
