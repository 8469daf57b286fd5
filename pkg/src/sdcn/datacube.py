"""Datacube model, ``.dcube`` I/O and the segmentation pipeline.

Cubes are held as ``(height, width, depth)`` arrays in C order, so pixel
``(i, j)`` (column ``i``, row ``j``) has flat id ``i + j * width`` and
flattening to a ``(width * height, depth)`` batch is a reshape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sdcn import _container
from sdcn.autoencoder import AutoEncoderModel, decode, encode
from sdcn.clustering import Init, KRange, iterative_kmeans
from sdcn.errors import DegenerateInputError, FormatError, InvalidDimensionError, ShapeError

CUBE_MAGIC = b"DCUB"
CUBE_VERSION = 1
MAX_ELEMENTS = 2 ** 34


@dataclass
class DataCube:
    data: np.ndarray  # (height, width, depth) float32
    channel_unit: str = "channel"
    channel_start: float = 0.0
    channel_step: float = 1.0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise InvalidDimensionError(f"cube data must be a non-empty 3-D array, got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> np.ndarray:
        return self.channel_start + self.channel_step * np.arange(self.depth)

    @classmethod
    def from_spectra(cls, spectra, width: int, height: int, **axis) -> "DataCube":
        spectra = np.asarray(spectra)
        return cls(spectra.reshape(height, width, spectra.shape[-1]), **axis)


def pixel_id(i: int, j: int, width: int) -> int:
    return i + j * width


def pixel_of(idx: int, width: int) -> tuple:
    return idx % width, idx // width


def flatten(cube: DataCube):
    """Spectra as a ``(width * height, depth)`` batch plus the ``(i, j)`` of every row."""
    spectra = cube.data.reshape(-1, cube.depth)
    ids = np.arange(cube.width * cube.height)
    index = np.stack([ids % cube.width, ids // cube.width], axis=1)
    return spectra, index


def unflatten(spectra, width: int, height: int) -> np.ndarray:
    spectra = np.asarray(spectra)
    if spectra.shape[0] != width * height:
        raise ShapeError(f"{spectra.shape[0]} spectra cannot fill a {width}x{height} image")
    return spectra.reshape(height, width, *spectra.shape[1:])


# -- .dcube container ----------------------------------------------------------

def _cube_payload_size(h: dict) -> int:
    try:
        w, hgt, d = int(h["width"]), int(h["height"]), int(h["depth"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"cube header lacks dimensions: {exc}") from exc
    if min(w, hgt, d) < 1:
        raise InvalidDimensionError(f"invalid cube dimensions {w}x{hgt}x{d}")
    if w * hgt * d > MAX_ELEMENTS:
        raise InvalidDimensionError(f"cube dimensions {w}x{hgt}x{d} overflow the element limit")
    if h.get("dtype") != "f32":
        raise FormatError(f"unsupported dtype {h.get('dtype')!r}")
    return 4 * w * hgt * d


def save_cube(cube: DataCube, path) -> None:
    header = {
        "width": cube.width,
        "height": cube.height,
        "depth": cube.depth,
        "dtype": "f32",
        "order": "pixel-major, channel-fastest",
        "channel_unit": cube.channel_unit,
        "channel_start": cube.channel_start,
        "channel_step": cube.channel_step,
    }
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    Path(path).write_bytes(_container.pack(CUBE_MAGIC, CUBE_VERSION, header, payload))


def load_cube(path) -> DataCube:
    header, payload = _container.unpack(
        Path(path).read_bytes(), CUBE_MAGIC, CUBE_VERSION, _cube_payload_size
    )
    data = np.frombuffer(payload, "<f4").reshape(header["height"], header["width"], header["depth"])
    return DataCube(
        data.astype(np.float32),
        header.get("channel_unit", "channel"),
        header.get("channel_start", 0.0),
        header.get("channel_step", 1.0),
    )


# -- segmentation ----------------------------------------------------------------

@dataclass
class SegmentationResult:
    """Per-cluster outputs, ordered by descending member count.

    ``decoded_barycenters`` is Dec of the latent barycenter,
    ``cluster_mean_reconstructed`` the member average of Dec[Enc[x]],
    ``cluster_mean_true`` the member average of the input spectra and
    ``decoded_latent_mean`` Dec of the member latent mean.
    """

    k: int
    labels: np.ndarray  # (height, width) cluster index per pixel
    masks: np.ndarray  # (k, height, width) bool
    barycenters: np.ndarray  # (k, latent_dim)
    decoded_barycenters: np.ndarray  # (k, depth)
    cluster_mean_reconstructed: np.ndarray
    cluster_mean_true: np.ndarray
    decoded_latent_mean: np.ndarray
    silhouette: float
    member_counts: np.ndarray
    silhouette_curve: dict
    channels: np.ndarray
    silhouette_cap: int | None = None


def _cluster_means(values, labels, k):
    onehot = np.zeros((k, len(labels)))
    onehot[labels, np.arange(len(labels))] = 1.0
    return (onehot @ values.astype(np.float64)) / onehot.sum(axis=1)[:, None]


def segment(cube: DataCube, model: AutoEncoderModel, krange: KRange = KRange(2, 8),
            init=Init.KPLUSPLUS, seed=0, silhouette_cap: int | None = None,
            n_init: int = 10) -> SegmentationResult:
    """Encode every pixel, cluster in latent space and summarise each cluster.

    Each candidate k keeps the lowest-inertia of ``n_init`` seeded K-Means runs.
    """
    if cube.depth != model.spec.input_dim:
        raise ShapeError(f"cube depth {cube.depth} != model input_dim {model.spec.input_dim}")
    spectra, _ = flatten(cube)
    mu = encode(model, spectra)
    if len(np.unique(mu, axis=0)) < 2:
        raise DegenerateInputError("all pixels map to one latent point; nothing to cluster")
    res = iterative_kmeans(mu, krange, init=init, seed=seed, silhouette_cap=silhouette_cap,
                           n_init=n_init)
    k = res.k
    counts = np.bincount(res.assignments, minlength=k)
    order = np.lexsort((np.arange(k), -counts))
    relabel = np.empty(k, dtype=np.intp)
    relabel[order] = np.arange(k)
    labels = relabel[res.assignments]
    counts = counts[order]

    barycenters = _cluster_means(mu, labels, k)
    decoded_bary = decode(model, barycenters.astype(model.dtype)).astype(np.float64)
    recon = decode(model, mu)
    mean_recon = _cluster_means(recon, labels, k)
    mean_true = _cluster_means(spectra, labels, k)
    label_img = labels.reshape(cube.height, cube.width)
    masks = label_img[None, :, :] == np.arange(k)[:, None, None]
    return SegmentationResult(
        k=k,
        labels=label_img,
        masks=masks,
        barycenters=barycenters,
        decoded_barycenters=decoded_bary,
        cluster_mean_reconstructed=mean_recon,
        cluster_mean_true=mean_true,
        decoded_latent_mean=decode(model, barycenters.astype(model.dtype)).astype(np.float64),
        silhouette=res.silhouette,
        member_counts=counts,
        silhouette_curve=dict(res.silhouette_curve),
        channels=cube.channels,
        silhouette_cap=silhouette_cap,
    )


def integrated_maps(cube: DataCube, model: AutoEncoderModel):
    """Channel-summed true (I), decoded (D) and latent-summed embedded (E) images."""
    if cube.depth != model.spec.input_dim:
        raise ShapeError(f"cube depth {cube.depth} != model input_dim {model.spec.input_dim}")
    spectra, _ = flatten(cube)
    mu = encode(model, spectra)
    rec = decode(model, mu)
    shape = (cube.height, cube.width)
    true_map = spectra.sum(axis=1, dtype=np.float64).reshape(shape)
    dec_map = rec.sum(axis=1, dtype=np.float64).reshape(shape)
    emb_map = mu.sum(axis=1, dtype=np.float64).reshape(shape)
    return true_map, dec_map, emb_map


def masked_rgb(masks, rgb_image) -> list:
    """One copy of ``rgb_image`` per mask with non-member pixels set to black."""
    rgb = np.asarray(rgb_image)
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim == 2:
        masks = masks[None]
    if masks.shape[1:] != rgb.shape[:2]:
        raise ShapeError(f"mask shape {masks.shape[1:]} != image shape {rgb.shape[:2]}")
    return [np.where(m[..., None], rgb, 0).astype(rgb.dtype) for m in masks]


# -- export ----------------------------------------------------------------------

SPECTRA_KINDS = {
    "decoded_barycenter": "decoded_barycenters",
    "mean_reconstructed": "cluster_mean_reconstructed",
    "mean_true": "cluster_mean_true",
    "decoded_latent_mean": "decoded_latent_mean",
}


def write_pgm(path, image) -> None:
    """Binary portable graymap (P5, maxval 255)."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    data = buf[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, np.uint8).reshape(h, w).copy()


def write_spectrum_csv(path, channels, values) -> None:
    lines = ["channel,value"]
    lines += [f"{c:.9g},{v:.9g}" for c, v in zip(channels, values)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_spectrum_csv(path):
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr[:, 0], arr[:, 1]


def summary_dict(result: SegmentationResult) -> dict:
    h, w = result.labels.shape
    return {
        "k": int(result.k),
        "silhouette": float(result.silhouette),
        "member_counts": [int(c) for c in result.member_counts],
        "width": int(w),
        "height": int(h),
        "depth": int(len(result.channels)),
        "silhouette_sample_cap": result.silhouette_cap,
        "silhouette_curve": {str(k): float(v) for k, v in sorted(result.silhouette_curve.items())},
    }


def export_result(result: SegmentationResult, out_dir) -> list:
    """Write masks (P5), per-cluster spectra (CSV) and ``summary.json``; return written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, mask in enumerate(result.masks):
        p = out / f"mask_{i}.pgm"
        write_pgm(p, mask.astype(np.uint8) * 255)
        written.append(p)
    spec_dir = out / "spectra"
    spec_dir.mkdir(exist_ok=True)
    for kind, attr in SPECTRA_KINDS.items():
        values = getattr(result, attr)
        for i in range(result.k):
            p = spec_dir / f"{kind}_{i}.csv"
            write_spectrum_csv(p, result.channels, values[i])
            written.append(p)
    p = out / "summary.json"
    p.write_text(json.dumps(summary_dict(result), indent=2, sort_keys=True) + "\n")
    written.append(p)
    return written


def load_masks(result_dir) -> np.ndarray:
    """Masks written by :func:`export_result`, stacked as a bool array."""
    d = Path(result_dir)
    summary = json.loads((d / "summary.json").read_text())
    return np.stack([read_pgm(d / f"mask_{i}.pgm") > 0 for i in range(summary["k"])])


def export_integrated_maps(maps, out_dir) -> list:
    """Write I/D/E maps as single-channel ``.dcube`` files plus 8-bit P5 previews."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, img in zip(("I", "D", "E"), maps):
        p = out / f"integrated_{name}.dcube"
        save_cube(DataCube(np.asarray(img)[:, :, None]), p)
        lo, hi = float(np.min(img)), float(np.max(img))
        scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo) * 255.0
        q = out / f"integrated_{name}.pgm"
        write_pgm(q, np.round(scaled))
        written += [p, q]
    return written
