import json
import struct

import numpy as np
import pytest

from sdcn.autoencoder import ArchitectureSpec, AutoEncoderModel, build_autoencoder
from sdcn.clustering import KRange
from sdcn.datacube import (
    DataCube,
    export_integrated_maps,
    export_result,
    flatten,
    integrated_maps,
    load_cube,
    load_masks,
    masked_rgb,
    pixel_id,
    pixel_of,
    read_pgm,
    read_spectrum_csv,
    save_cube,
    segment,
    unflatten,
    write_pgm,
)
from sdcn.errors import (
    BadMagicError,
    ChecksumError,
    DegenerateInputError,
    InvalidDimensionError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)
from sdcn.nn import DenseLayer, Network


def linear_model(depth, latent=2, seed=0):
    """Autoencoder whose layers are all identity-activated (a linear map each way)."""
    rng = np.random.default_rng(seed)
    spec = ArchitectureSpec(depth, latent, "explicit", explicit_sizes=[depth, 4], variant="mlp")
    enc = Network([DenseLayer(rng.standard_normal((4, depth)), rng.standard_normal(4)),
                   DenseLayer(rng.standard_normal((latent, 4)), rng.standard_normal(latent))],
                  "encoder")
    dec = Network([DenseLayer(rng.standard_normal((4, latent)), rng.standard_normal(4)),
                   DenseLayer(rng.standard_normal((depth, 4)), rng.standard_normal(depth))],
                  "decoder")
    return AutoEncoderModel(enc, dec, spec)


def zero_linear_model(depth, latent=2):
    spec = ArchitectureSpec(depth, latent, "explicit", explicit_sizes=[depth], variant="mlp")
    enc = Network([DenseLayer(np.eye(latent, depth), np.zeros(latent))], "encoder")
    dec = Network([DenseLayer(np.eye(depth, latent), np.zeros(depth))], "decoder")
    return AutoEncoderModel(enc, dec, spec)


def three_region_cube(w=12, h=10, depth=8, seed=0):
    rng = np.random.default_rng(seed)
    truth = np.zeros((h, w), int)
    truth[:, w // 3:] = 1
    truth[h // 2:, 2 * w // 3:] = 2
    templates = rng.uniform(0, 10, (3, depth))
    data = templates[truth] + 0.01 * rng.standard_normal((h, w, depth))
    return DataCube(data), truth


# -- indexing ---------------------------------------------------------------------

def test_pixel_id_formula():
    assert pixel_id(1, 2, 4) == 9
    assert pixel_of(9, 4) == (1, 2)
    for idx in range(20):
        assert pixel_id(*pixel_of(idx, 5), 5) == idx


def test_flatten_order_and_inverse():
    data = np.arange(2 * 2 * 3, dtype=np.float32).reshape(2, 2, 3)
    cube = DataCube(data)
    spectra, index = flatten(cube)
    assert spectra.shape == (4, 3)
    for a in range(4):
        i, j = index[a]
        assert pixel_id(i, j, cube.width) == a
        assert np.array_equal(spectra[a], data[j, i])
    assert np.array_equal(unflatten(spectra, 2, 2), data)


def test_unflatten_size_mismatch():
    with pytest.raises(ShapeError):
        unflatten(np.zeros((5, 3)), 2, 2)


# -- .dcube -----------------------------------------------------------------------

def test_cube_round_trip(tmp_path):
    data = np.random.default_rng(0).standard_normal((3, 4, 8)).astype(np.float32)
    cube = DataCube(data, "keV", 0.5, 0.04)
    save_cube(cube, tmp_path / "c.dcube")
    back = load_cube(tmp_path / "c.dcube")
    assert back.data.tobytes() == data.tobytes()
    assert (back.width, back.height, back.depth) == (4, 3, 8)
    assert (back.channel_unit, back.channel_start, back.channel_step) == ("keV", 0.5, 0.04)
    save_cube(back, tmp_path / "d.dcube")
    assert (tmp_path / "d.dcube").read_bytes() == (tmp_path / "c.dcube").read_bytes()


def _raw_cube(header, payload=b""):
    from sdcn import _container
    return _container.pack(b"DCUB", 1, header, payload)


def test_cube_truncated_payload(tmp_path):
    p = tmp_path / "t.dcube"
    p.write_bytes(_raw_cube({"width": 10, "height": 10, "depth": 100, "dtype": "f32"}, b"\0" * 400))
    with pytest.raises(TruncatedFileError):
        load_cube(p)


def test_cube_zero_depth(tmp_path):
    p = tmp_path / "z.dcube"
    p.write_bytes(_raw_cube({"width": 2, "height": 2, "depth": 0, "dtype": "f32"}))
    with pytest.raises(InvalidDimensionError):
        load_cube(p)


def test_cube_dimension_overflow(tmp_path):
    p = tmp_path / "o.dcube"
    p.write_bytes(_raw_cube({"width": 2 ** 20, "height": 2 ** 20, "depth": 2 ** 20, "dtype": "f32"}))
    with pytest.raises(InvalidDimensionError):
        load_cube(p)


def test_cube_corruption_errors(tmp_path):
    p = tmp_path / "c.dcube"
    save_cube(DataCube(np.ones((2, 2, 4))), p)
    good = p.read_bytes()
    bad = bytearray(good)
    bad[-8] ^= 1
    p.write_bytes(bytes(bad))
    with pytest.raises(ChecksumError):
        load_cube(p)
    p.write_bytes(b"SDCN" + good[4:])
    with pytest.raises(BadMagicError):
        load_cube(p)
    p.write_bytes(good[:4] + struct.pack("<H", 2) + good[6:])
    with pytest.raises(VersionError):
        load_cube(p)


def test_cube_rejects_empty_data():
    with pytest.raises(InvalidDimensionError):
        DataCube(np.zeros((0, 2, 3)))


# -- segmentation -----------------------------------------------------------------

def test_segment_three_regions_partition():
    cube, truth = three_region_cube()
    model = linear_model(cube.depth)
    res = segment(cube, model, KRange(2, 5), seed=0)
    assert res.k == 3
    assert np.array_equal(res.masks.sum(axis=0), np.ones_like(truth))
    assert res.member_counts.tolist() == [int(m.sum()) for m in res.masks]
    assert list(res.member_counts) == sorted(res.member_counts, reverse=True)
    for m in res.masks:
        assert len(np.unique(truth[m])) == 1


def test_linear_decoder_averages_commute():
    cube, _ = three_region_cube(seed=3)
    res = segment(cube, linear_model(cube.depth, seed=4), KRange(2, 5))
    assert np.max(np.abs(res.cluster_mean_reconstructed - res.decoded_latent_mean)) < 1e-9
    assert np.array_equal(res.decoded_latent_mean, res.decoded_barycenters)


def test_nonlinear_decoder_averages_differ():
    cube, _ = three_region_cube(depth=16, seed=5)
    data = cube.data + np.random.default_rng(0).uniform(0, 5, cube.data.shape).astype(np.float32)
    model = build_autoencoder(ArchitectureSpec(16, 2, variant="mlp"), 0)
    res = segment(DataCube(data), model, KRange(2, 4))
    assert np.max(np.abs(res.cluster_mean_reconstructed - res.decoded_latent_mean)) > 1e-3


def test_cluster_means_match_direct_computation():
    cube, _ = three_region_cube(seed=6)
    model = linear_model(cube.depth, seed=1)
    res = segment(cube, model, KRange(2, 5))
    spectra, _ = flatten(cube)
    for i, m in enumerate(res.masks):
        assert np.allclose(res.cluster_mean_true[i], spectra[m.ravel()].mean(axis=0), atol=1e-9)


def test_segment_depth_mismatch():
    cube, _ = three_region_cube()
    with pytest.raises(ShapeError):
        segment(cube, linear_model(cube.depth + 1))


def test_segment_degenerate_cube():
    cube = DataCube(np.ones((4, 4, 8)))
    with pytest.raises(DegenerateInputError):
        segment(cube, linear_model(8))


def test_segment_is_deterministic():
    cube, _ = three_region_cube(seed=8)
    model = linear_model(cube.depth, seed=2)
    a, b = segment(cube, model, seed=3), segment(cube, model, seed=3)
    assert np.array_equal(a.labels, b.labels) and a.silhouette == b.silhouette


# -- integrated maps --------------------------------------------------------------

def test_integrated_maps_of_zero_cube():
    maps = integrated_maps(DataCube(np.zeros((3, 5, 6))), zero_linear_model(6))
    for m in maps:
        assert m.shape == (3, 5) and np.all(m == 0)


def test_integrated_true_map_is_channel_sum():
    cube, _ = three_region_cube()
    model = linear_model(cube.depth)
    i_map, d_map, e_map = integrated_maps(cube, model)
    oracle = np.zeros((cube.height, cube.width))
    for j in range(cube.height):
        for i in range(cube.width):
            oracle[j, i] = sum(float(v) for v in cube.data[j, i])
    assert np.allclose(i_map, oracle, rtol=1e-12, atol=1e-9)
    from sdcn.autoencoder import decode, encode
    mu = encode(model, flatten(cube)[0])
    assert np.allclose(e_map.ravel(), mu.sum(axis=1))
    assert np.allclose(d_map.ravel(), decode(model, mu).sum(axis=1))


# -- masked rgb -------------------------------------------------------------------

def test_masked_rgb():
    rgb = np.random.default_rng(0).integers(0, 256, (4, 5, 3), dtype=np.uint8)
    ones, zeros = np.ones((4, 5), bool), np.zeros((4, 5), bool)
    assert np.array_equal(masked_rgb(ones, rgb)[0], rgb)
    assert np.all(masked_rgb(zeros, rgb)[0] == 0)
    half = np.zeros((4, 5), bool)
    half[:2] = True
    parts = masked_rgb(np.stack([half, ~half]), rgb)
    assert np.array_equal(parts[0] + parts[1], rgb)
    with pytest.raises(ShapeError):
        masked_rgb(np.ones((3, 3), bool), rgb)


# -- export -----------------------------------------------------------------------

def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 9), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n9 7\n255\n")
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_export_manifest_and_determinism(tmp_path):
    cube, _ = three_region_cube(seed=9)
    res = segment(cube, linear_model(cube.depth, seed=9), KRange(2, 5))
    files = export_result(res, tmp_path / "a")
    names = sorted(p.relative_to(tmp_path / "a").as_posix() for p in files)
    assert [n for n in names if n.startswith("mask_")] == [f"mask_{i}.pgm" for i in range(res.k)]
    for kind in ("decoded_barycenter", "mean_reconstructed", "mean_true", "decoded_latent_mean"):
        assert [n for n in names if n.startswith(f"spectra/{kind}_")] == \
            [f"spectra/{kind}_{i}.csv" for i in range(res.k)]
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["k"] == res.k
    assert sum(summary["member_counts"]) == cube.width * cube.height
    assert summary["silhouette"] == res.silhouette
    assert np.array_equal(load_masks(tmp_path / "a"), res.masks)
    export_result(res, tmp_path / "b")
    for p in files:
        rel = p.relative_to(tmp_path / "a")
        assert (tmp_path / "b" / rel).read_bytes() == p.read_bytes()


def test_spectrum_csv_format(tmp_path):
    cube, _ = three_region_cube(seed=1)
    res = segment(cube, linear_model(cube.depth), KRange(2, 4))
    export_result(res, tmp_path)
    text = (tmp_path / "spectra" / "mean_true_0.csv").read_text().splitlines()
    assert text[0] == "channel,value"
    assert len(text) == cube.depth + 1
    ch, val = read_spectrum_csv(tmp_path / "spectra" / "mean_true_0.csv")
    assert np.allclose(val, res.cluster_mean_true[0], rtol=1e-8)
    assert np.array_equal(ch, np.arange(cube.depth))


def test_export_integrated(tmp_path):
    cube, _ = three_region_cube()
    maps = integrated_maps(cube, linear_model(cube.depth))
    files = export_integrated_maps(maps, tmp_path)
    assert sorted(p.name for p in files) == sorted(
        f"integrated_{n}.{ext}" for n in "IDE" for ext in ("dcube", "pgm"))
    back = load_cube(tmp_path / "integrated_I.dcube")
    assert back.depth == 1
    assert np.allclose(back.data[:, :, 0], maps[0].astype(np.float32))
