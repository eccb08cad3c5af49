import numpy as np
import pytest

from opensd.decoder import (
    Backbone,
    BackboneConfig,
    DecoderConfig,
    DecoupledDecoder,
    SharedDecoder,
    mask_head,
)
from opensd.tensor import Tensor, tsum

SMALL = DecoderConfig(d=8, d_text=8, layers=2, heads=2, thing_queries=3, stuff_queries=2,
                      deform_heads=2, deform_points=2,
                      backbone=BackboneConfig(patch_size=4, embed_dim=8, conv_layers=1))


def image(seed=0, size=16):
    return np.random.default_rng(seed).random((size, size, 3))


def test_feature_map_shape():
    bb = Backbone(BackboneConfig(4, 8, 2), np.random.default_rng(0))
    assert bb(image(size=32)).shape == (8, 8, 8)


def test_indivisible_image_rejected():
    bb = Backbone(BackboneConfig(4, 8, 2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        bb(np.zeros((30, 32, 3)))


def test_zero_image_zero_features():
    bb = Backbone(BackboneConfig(4, 8, 2), np.random.default_rng(0))
    assert np.all(bb(np.zeros((16, 16, 3))).data == 0.0)


def test_patch_locality_without_convs():
    bb = Backbone(BackboneConfig(4, 8, 0), np.random.default_rng(0))
    a = image(1)
    b = a.copy()
    b[4:8, 8:12] = 0.0
    diff = np.any(bb(a).data != bb(b).data, axis=-1)
    expected = np.zeros((4, 4), bool)
    expected[1, 2] = True
    assert np.array_equal(diff, expected)


def test_mask_head_matches_loop():
    rng = np.random.default_rng(2)
    feat, emb = rng.normal(size=(3, 4, 5)), rng.normal(size=(2, 5))
    out = mask_head(Tensor(feat), Tensor(emb)).data
    loop = np.zeros((2, 3, 4))
    for i in range(2):
        for y in range(3):
            for x in range(4):
                loop[i, y, x] = sum(feat[y, x, k] * emb[i, k] for k in range(5))
    assert np.allclose(out, loop, atol=1e-13)


def test_decoupled_outputs_shapes_and_box_range():
    dec = DecoupledDecoder(SMALL, np.random.default_rng(0))
    thing, stuff = dec(image())
    assert thing.masks.shape == (3, 4, 4) and stuff.masks.shape == (2, 4, 4)
    assert thing.boxes.shape == (3, 4) and stuff.boxes is None
    assert np.all((thing.boxes.data >= 0) & (thing.boxes.data <= 1))
    assert len(thing.layers()) == len(stuff.layers()) == SMALL.layers
    assert thing.query_emb.shape == (3, 8) and thing.class_emb.shape == (3, 8)


def test_branch_isolation_forward():
    dec = DecoupledDecoder(SMALL.__class__(**{**SMALL.__dict__, "layers": 1}),
                           np.random.default_rng(0))
    before, _ = dec(image())
    dec.stuff.queries.embeddings.data = dec.stuff.queries.embeddings.data + 1.0
    after, stuff = dec(image())
    assert np.array_equal(before.masks.data, after.masks.data)
    assert np.array_equal(before.class_emb.data, after.class_emb.data)


def test_branch_isolation_gradients():
    dec = DecoupledDecoder(SMALL, np.random.default_rng(0))
    thing, stuff = dec(image())
    tsum(thing.masks * thing.masks).backward()
    for name, p in dec.stuff.named_parameters():
        assert p.grad is None or np.all(p.grad == 0), name
    assert dec.thing.queries.embeddings.grad is not None
    dec.zero_grad()
    thing, stuff = dec(image())
    tsum(stuff.masks * stuff.masks).backward()
    for name, p in dec.thing.named_parameters():
        assert p.grad is None or np.all(p.grad == 0), name


def test_heads_shared_across_layers():
    dec = DecoupledDecoder(SMALL, np.random.default_rng(0))
    names = [n for n, _ in dec.named_parameters()]
    assert sum(n.startswith("thing.heads.mask_embed") for n in names) == 6  # 3 linears
    thing, _ = dec(image())
    assert len(thing.aux) == SMALL.layers - 1


def test_shared_baseline_single_query_group_and_determinism():
    shared = SharedDecoder(SMALL, np.random.default_rng(0))
    dec = DecoupledDecoder(SMALL, np.random.default_rng(0))
    assert len(shared.query_groups()) == 1 and len(dec.query_groups()) == 2
    assert shared.query_groups()[0].count == SMALL.thing_queries + SMALL.stuff_queries
    a = shared(image()).masks.data
    b = SharedDecoder(SMALL, np.random.default_rng(0))(image()).masks.data
    assert np.array_equal(a, b)
    assert shared(image()).boxes is not None


def test_stuff_first_layer_full_attention(monkeypatch):
    dec = DecoupledDecoder(SMALL, np.random.default_rng(0))
    seen = []
    layer_cls = type(dec.stuff.layers[0])
    original = layer_cls.__call__

    def spy(self, x, feat, mask, key_pos):
        seen.append(mask)
        return original(self, x, feat, mask, key_pos)

    monkeypatch.setattr(layer_cls, "__call__", spy)
    dec(image())
    assert seen[0] is None and all(m is not None and m.dtype == bool for m in seen[1:])
