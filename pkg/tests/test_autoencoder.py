import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdcn.autoencoder import (
    ArchitectureSpec,
    AutoEncoderModel,
    build_autoencoder,
    decode,
    encode,
    load_model,
    plan_decoder_sizes,
    plan_layer_sizes,
    save_model,
)
from sdcn.errors import (
    BadMagicError,
    ChecksumError,
    InvalidArchitectureError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)
from sdcn.nn import Activation, DenseLayer, Network

ASTRO = ArchitectureSpec(1024, 3, "explicit", explicit_sizes=[1024, 512, 256, 32],
                         decoder_sizes=[3, 128, 256, 1024])
XRF = ArchitectureSpec(512, 3, "explicit", explicit_sizes=[512, 256, 128, 64, 32],
                       decoder_sizes=[3, 64, 128, 256, 512])


def test_explicit_chains_of_the_reference_models():
    assert plan_layer_sizes(ASTRO) == [1024, 512, 256, 32, 3]
    assert plan_layer_sizes(XRF) == [512, 256, 128, 64, 32, 3]


def test_decoder_chains_of_the_reference_models():
    assert plan_decoder_sizes(ASTRO) == [3, 128, 256, 1024]
    assert plan_decoder_sizes(XRF) == [3, 64, 128, 256, 512]


def test_pow2_rule():
    assert plan_layer_sizes(ArchitectureSpec(64, 4, "pow2", n_hidden=2)) == [64, 32, 16, 4]


def test_half_k_rule():
    # 96 // 2 = 48, 96 // 4 = 24, 96 // 6 = 16
    assert plan_layer_sizes(ArchitectureSpec(96, 3, "half_k", n_hidden=3)) == [96, 48, 24, 16, 3]


def test_rule_stops_at_twice_latent():
    assert plan_layer_sizes(ArchitectureSpec(64, 8, "pow2", n_hidden=5)) == [64, 32, 16, 8]


def test_symmetric_mirror():
    spec = ArchitectureSpec(8, 2, "pow2", n_hidden=1)
    model = build_autoencoder(spec, 0)
    assert [l.in_dim for l in model.encoder.layers] + [2] == [8, 4, 2]
    assert plan_decoder_sizes(spec) == [2, 4, 8]


def test_non_decreasing_explicit_chain_rejected():
    with pytest.raises(InvalidArchitectureError):
        plan_layer_sizes(ArchitectureSpec(64, 3, "explicit", explicit_sizes=[64, 64, 8]))
    with pytest.raises(InvalidArchitectureError):
        plan_layer_sizes(ArchitectureSpec(64, 8, "explicit", explicit_sizes=[64, 4]))


def test_latent_must_be_below_input():
    with pytest.raises(InvalidArchitectureError):
        ArchitectureSpec(4, 4)


def test_bad_decoder_chain_rejected():
    with pytest.raises(InvalidArchitectureError):
        plan_decoder_sizes(ArchitectureSpec(16, 2, decoder_sizes=[2, 8, 4, 16]))
    with pytest.raises(InvalidArchitectureError):
        plan_decoder_sizes(ArchitectureSpec(16, 2, decoder_sizes=[3, 8, 16]))


def test_dropout_only_for_mlp():
    with pytest.raises(InvalidArchitectureError):
        ArchitectureSpec(16, 2, variant="snn", dropout_p=0.1)
    model = build_autoencoder(ArchitectureSpec(16, 2, variant="mlp", dropout_p=0.1), 0)
    assert model.encoder.layers[0].activation is Activation.RELU
    assert model.encoder.layers[0].dropout_p == 0.1
    assert model.encoder.layers[-1].dropout_p == 0.0


def test_heads_are_linear_and_hidden_selu():
    model = build_autoencoder(ASTRO, 0)
    for net in model.networks:
        assert net.layers[-1].activation is Activation.IDENTITY
        assert all(l.activation is Activation.SELU for l in net.layers[:-1])


def test_build_is_deterministic():
    a, b = build_autoencoder(XRF, 5), build_autoencoder(XRF, 5)
    for la, lb in zip(a.encoder.layers + a.decoder.layers, b.encoder.layers + b.decoder.layers):
        assert np.array_equal(la.weights, lb.weights)


def identity_model():
    """All-identity toy: encoder keeps the first two coordinates, decoder pads with zeros."""
    spec = ArchitectureSpec(4, 2, "explicit", explicit_sizes=[4], variant="mlp")
    enc = Network([DenseLayer(np.eye(2, 4), np.zeros(2), "identity")], "encoder")
    dec = Network([DenseLayer(np.eye(4, 2), np.zeros(4), "identity")], "decoder")
    return AutoEncoderModel(enc, dec, spec)


def test_encode_identity_toy():
    x = np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]])
    assert encode(identity_model(), x).tolist() == [[1.0, 2.0], [5.0, 6.0]]


def test_decode_identity_toy():
    assert decode(identity_model(), np.array([[1.0, 2.0]])).tolist() == [[1.0, 2.0, 0.0, 0.0]]


def test_duplicate_rows_map_to_duplicate_points():
    model = build_autoencoder(ArchitectureSpec(32, 3), 1)
    x = np.random.default_rng(0).standard_normal((3, 32)).astype(np.float32)
    z = encode(model, np.vstack([x, x[1:2]]))
    assert np.array_equal(z[1], z[3])
    out = decode(model, np.vstack([z, z[0:1]]))
    assert np.array_equal(out[0], out[-1])


def test_encode_shape_error():
    with pytest.raises(ShapeError):
        encode(identity_model(), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        decode(identity_model(), np.zeros((2, 3)))


def test_scale_is_applied_on_both_sides():
    model = identity_model()
    model.scale = 10.0
    assert encode(model, [[10.0, 20.0, 0.0, 0.0]]).tolist() == [[1.0, 2.0]]
    assert decode(model, [[1.0, 2.0]]).tolist() == [[10.0, 20.0, 0.0, 0.0]]


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 64), st.integers(1, 3), st.sampled_from(["pow2", "half_k"]),
       st.integers(1, 4))
def test_shapes_are_stable(d, n, rule, hidden):
    spec = ArchitectureSpec(d, n, rule, n_hidden=hidden)
    model = build_autoencoder(spec, 0)
    x = np.ones((2, d), np.float32)
    assert encode(model, x).shape == (2, n)
    assert decode(model, encode(model, x)).shape == (2, d)
    if spec.decoder_sizes is None:
        assert plan_decoder_sizes(spec) == plan_layer_sizes(spec)[::-1]


# -- model file -------------------------------------------------------------------

@pytest.fixture
def saved(tmp_path):
    model = build_autoencoder(ArchitectureSpec(24, 3, variant="mlp", dropout_p=0.2), 3)
    model.scale = 2.5
    model.metadata = {"best_epoch": 4}
    path = tmp_path / "m.sdcn"
    save_model(model, path)
    return model, path


def test_round_trip_is_bit_exact(saved):
    model, path = saved
    loaded = load_model(path)
    x = np.random.default_rng(0).standard_normal((5, 24)).astype(np.float32)
    assert np.array_equal(encode(model, x), encode(loaded, x))
    for a, b in zip(model.encoder.layers + model.decoder.layers,
                    loaded.encoder.layers + loaded.decoder.layers):
        assert a.weights.tobytes() == b.weights.tobytes()
        assert a.bias.tobytes() == b.bias.tobytes()
        assert (a.activation, a.dropout_p) == (b.activation, b.dropout_p)
    assert loaded.spec == model.spec
    assert (loaded.scale, loaded.seed, loaded.metadata) == (2.5, 3, {"best_epoch": 4})


def test_resave_is_byte_identical(saved, tmp_path):
    _, path = saved
    again = tmp_path / "again.sdcn"
    save_model(load_model(path), again)
    assert again.read_bytes() == path.read_bytes()


def test_corrupt_payload_byte(saved):
    _, path = saved
    buf = bytearray(path.read_bytes())
    buf[-20] ^= 0xFF
    path.write_bytes(bytes(buf))
    with pytest.raises(ChecksumError):
        load_model(path)


def test_unknown_version(saved):
    _, path = saved
    buf = bytearray(path.read_bytes())
    buf[4:6] = struct.pack("<H", 9)
    path.write_bytes(bytes(buf))
    with pytest.raises(VersionError) as info:
        load_model(path)
    assert (info.value.found, info.value.expected) == (9, 1)
    assert "9" in str(info.value) and "1" in str(info.value)


def test_truncated_file(saved):
    _, path = saved
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(TruncatedFileError):
        load_model(path)


def test_bad_magic(saved):
    _, path = saved
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(BadMagicError):
        load_model(path)
