"""Network forward correctness and checkpoint round-trips.

The MLP forward pass is checked against a straight-line numpy
reimplementation, so any regression in the graph plumbing shows up as a
numeric mismatch rather than a plausible-looking wrong answer.
"""

import numpy as np
import pytest

from marginlab import (
    CheckpointShapeError,
    CheckpointVersionError,
    CorruptCheckpointError,
    LayerSpec,
    Network,
    Tensor,
    conv_classifier,
    init_parameters,
    load_checkpoint,
    mlp_classifier,
    save_checkpoint,
)


def straight_line_mlp(net: Network, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hand-rolled dense/leaky-relu forward returning (embedding, logits)."""
    h = x.reshape(x.shape[0], -1)
    params = iter(net.params)
    embedding = None
    for idx, layer in enumerate(net.layers):
        if layer.kind == "dense":
            w, b = next(params), next(params)
            h = h @ w.array + b.array
        elif layer.kind == "leaky_relu":
            h = np.where(h >= 0, h, layer.slope * h)
        else:
            raise AssertionError(f"unexpected layer {layer.kind}")
        if idx == net.embedding_index:
            embedding = h.copy()
    return embedding, h


def test_mlp_forward_matches_straight_line(rng):
    net = mlp_classifier(num_classes=4, input_dim=6, hidden=10, embedding_dim=5, seed=2)
    x = rng.random((7, 6))
    want_emb, want_logits = straight_line_mlp(net, x)
    np.testing.assert_allclose(net.embed(x), want_emb, atol=1e-13)
    np.testing.assert_allclose(net.logits_array(x), want_logits, atol=1e-13)


def test_predict_is_argmax_and_probabilities_normalize(rng):
    net = mlp_classifier(num_classes=3, input_dim=4, hidden=8, embedding_dim=4, seed=5)
    x = rng.random((9, 4))
    logits = net.logits_array(x)
    np.testing.assert_array_equal(net.predict(x), logits.argmax(axis=-1))
    p = net.probabilities(x)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)
    np.testing.assert_array_equal(p.argmax(axis=-1), net.predict(x))


def test_embedding_is_an_intermediate_activation(tiny_net, tiny_batch):
    x, _ = tiny_batch
    z = tiny_net.embed(x)
    assert z.shape == (x.shape[0], tiny_net.embedding_dim)


def test_init_parameters_scale_and_determinism():
    layers = (
        LayerSpec("dense", in_features=100, out_features=200),
        LayerSpec("leaky_relu"),
        LayerSpec("dense", in_features=200, out_features=10),
    )
    p1 = init_parameters(layers, seed=7)
    p2 = init_parameters(layers, seed=7)
    for a, b in zip(p1, p2):
        assert a.array.tobytes() == b.array.tobytes()
    w = p1[0].array
    bound = np.sqrt(6.0 / 100)
    assert w.min() >= -bound and w.max() <= bound
    # uniform(-b, b) has variance b^2/3 = 2/fan_in
    assert np.var(w) == pytest.approx(2.0 / 100, rel=0.1)
    np.testing.assert_array_equal(p1[1].array, np.zeros(200))


def test_conv_classifier_shapes(rng):
    net = conv_classifier(num_classes=10, in_channels=1, image_size=28, channels=(4, 8), embedding_dim=16, seed=1)
    x = rng.random((3, 1, 28, 28))
    assert net.logits_array(x).shape == (3, 10)
    assert net.embed(x).shape == (3, 16)


def test_conv_classifier_rejects_bad_image_size():
    with pytest.raises(ValueError):
        conv_classifier(image_size=30)


def test_network_rejects_wrong_param_shapes():
    net = mlp_classifier(num_classes=3, input_dim=4, hidden=6, embedding_dim=5, seed=0)
    bad = list(net.params)
    bad[0] = Tensor(np.zeros((4, 7)))
    with pytest.raises(CheckpointShapeError):
        Network(
            layers=net.layers,
            params=tuple(bad),
            embedding_index=net.embedding_index,
            num_classes=net.num_classes,
            input_shape=net.input_shape,
        )


def test_with_params_preserves_structure(tiny_net, rng):
    new_params = [Tensor(rng.standard_normal(p.shape) * 0.1) for p in tiny_net.params]
    net2 = tiny_net.with_params(new_params)
    assert net2.layers == tiny_net.layers
    assert net2.embedding_index == tiny_net.embedding_index
    x = rng.random((2, 4))
    assert not np.allclose(net2.logits_array(x), tiny_net.logits_array(x))


def test_prepare_flattens_and_validates(tiny_net, rng):
    x = rng.random((3, 2, 2))  # 4 features in a nested shape
    flat = tiny_net.prepare(x)
    assert flat.shape == (3, 4)
    with pytest.raises(ValueError):
        tiny_net.prepare(rng.random((3, 5)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_mlp(tmp_path, tiny_net, tiny_batch):
    path = tmp_path / "model.ckpt"
    save_checkpoint(tiny_net, path)
    loaded = load_checkpoint(path)
    assert loaded.layers == tiny_net.layers
    assert loaded.embedding_index == tiny_net.embedding_index
    assert loaded.num_classes == tiny_net.num_classes
    assert loaded.input_shape == tiny_net.input_shape
    x, _ = tiny_batch
    assert loaded.logits_array(x).tobytes() == tiny_net.logits_array(x).tobytes()


def test_checkpoint_roundtrip_conv(tmp_path, rng):
    net = conv_classifier(num_classes=5, image_size=8, channels=(3, 4), embedding_dim=6, seed=9)
    path = tmp_path / "conv.ckpt"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    x = rng.random((2, 1, 8, 8))
    assert loaded.logits_array(x).tobytes() == net.logits_array(x).tobytes()


def test_checkpoint_magic_bytes(tmp_path, tiny_net):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_net, path)
    assert path.read_bytes()[:4] == b"MADN"


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path, tiny_net):
    path = tmp_path / "t.ckpt"
    save_checkpoint(tiny_net, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_unknown_version(tmp_path, tiny_net):
    path = tmp_path / "v.ckpt"
    save_checkpoint(tiny_net, path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)
