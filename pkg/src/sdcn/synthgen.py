"""Synthetic spectra and RGB-seeded datacubes.

Two generators live here. Line-list spectra sum Gaussian emission lines
(instrumental and physical widths added in quadrature) and add Gaussian
noise. Seeded cubes cluster an RGB image, map each colour cluster to the
nearest dictionary entry and fill every pixel with that entry's spectrum
plus noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sdcn.clustering import KRange, iterative_kmeans
from sdcn.datacube import DataCube
from sdcn.errors import ShapeError

RGB_DIAGONAL = np.sqrt(3.0) * 255.0
BACKGROUND = "background"


@dataclass(frozen=True)
class Grid:
    start: float
    step: float
    depth: int

    @property
    def axis(self) -> np.ndarray:
        return self.start + self.step * np.arange(self.depth)

    @property
    def stop(self) -> float:
        return self.start + self.step * (self.depth - 1)


@dataclass
class LineList:
    lines: list  # [(center, flux), ...]
    grid: Grid
    sigma_instrumental: float = 0.0
    sigma_physical_range: tuple = (0.0, 0.0)
    noise_std: float = 0.0

    def __post_init__(self):
        lo, hi = self.sigma_physical_range
        if not hi >= lo >= 0:
            raise ValueError(f"invalid physical width range {self.sigma_physical_range}")
        if self.sigma_instrumental < 0 or self.noise_std < 0:
            raise ValueError("widths and noise must be non-negative")
        for center, flux in self.lines:
            if flux < 0:
                raise ValueError(f"line at {center} has negative flux")
            if not self.grid.start <= center <= self.grid.stop:
                raise ValueError(
                    f"line center {center} outside grid [{self.grid.start}, {self.grid.stop}]"
                )


def gaussian_profile(axis, center, sigma, flux=1.0):
    """``flux`` times a unit-area Gaussian sampled at ``axis``."""
    return flux * np.exp(-0.5 * ((axis - center) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def synth_line_spectrum(linelist: LineList, seed) -> np.ndarray:
    """One spectrum: Gaussian lines with a randomly drawn physical width plus noise."""
    rng = _rng(seed)
    axis = linelist.grid.axis
    out = np.zeros(linelist.grid.depth)
    lo, hi = linelist.sigma_physical_range
    sigma_phys = rng.uniform(lo, hi) if hi > lo else lo
    sigma = np.sqrt(linelist.sigma_instrumental ** 2 + sigma_phys ** 2)
    if linelist.lines and sigma <= 0:
        raise ValueError("total line width is zero")
    for center, flux in linelist.lines:
        out += gaussian_profile(axis, center, sigma, flux)
    if linelist.noise_std > 0:
        out += rng.normal(0.0, linelist.noise_std, out.shape)
    return out


def mix_models(spectrum_a, spectrum_b, seed, weight: float | None = None) -> np.ndarray:
    """Convex combination ``w * a + (1 - w) * b`` with ``w ~ U(0, 1)`` unless given."""
    a, b = np.asarray(spectrum_a, float), np.asarray(spectrum_b, float)
    if a.shape != b.shape:
        raise ShapeError(f"spectra on different grids: {a.shape} vs {b.shape}")
    w = _rng(seed).uniform(0.0, 1.0) if weight is None else float(weight)
    return w * a + (1.0 - w) * b


def mix_line_lists(a: LineList, b: LineList, seed) -> LineList:
    """Line list whose fluxes mix ``a`` and ``b`` with one random weight (same line set)."""
    if [c for c, _ in a.lines] != [c for c, _ in b.lines]:
        raise ValueError("line lists must share their line centers")
    fa = np.array([f for _, f in a.lines])
    fb = np.array([f for _, f in b.lines])
    flux = mix_models(fa, fb, seed)
    return LineList(
        [(c, float(f)) for (c, _), f in zip(a.lines, flux)], a.grid, a.sigma_instrumental,
        a.sigma_physical_range, a.noise_std,
    )


# -- dictionary and seeded cubes --------------------------------------------------

@dataclass
class DictionaryEntry:
    label: str
    rgb: tuple
    template: np.ndarray

    def __post_init__(self):
        self.rgb = tuple(int(c) for c in self.rgb)
        self.template = np.asarray(self.template, dtype=np.float64)
        if len(self.rgb) != 3 or not all(0 <= c <= 255 for c in self.rgb):
            raise ValueError(f"{self.label}: rgb must be three values in [0, 255]")
        if np.any(self.template < 0):
            raise ValueError(f"{self.label}: template has negative values")


@dataclass
class SpectralDictionary:
    entries: list
    grid: Grid | None = None

    def __post_init__(self):
        if not self.entries:
            raise ValueError("spectral dictionary is empty")
        labels = [e.label for e in self.entries]
        if len(set(labels)) != len(labels):
            raise ValueError("dictionary labels must be distinct")
        if BACKGROUND in labels:
            raise ValueError(f"{BACKGROUND!r} is reserved")
        depths = {len(e.template) for e in self.entries}
        if len(depths) != 1:
            raise ValueError(f"templates have different depths {sorted(depths)}")

    @property
    def depth(self) -> int:
        return len(self.entries[0].template)

    @property
    def colors(self) -> np.ndarray:
        return np.array([e.rgb for e in self.entries], dtype=np.float64)


def load_dictionary(path) -> SpectralDictionary:
    """Read ``{depth, entries: [{label, rgb, template | template_csv_path}]}``.

    CSV paths are resolved relative to the JSON file; the value column is
    the last column of the CSV.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = []
    for e in doc["entries"]:
        if "template" in e:
            tmpl = e["template"]
        else:
            csv = (path.parent / e["template_csv_path"]).resolve()
            tmpl = np.loadtxt(csv, delimiter=",", skiprows=1, ndmin=2)[:, -1]
        entries.append(DictionaryEntry(e["label"], e["rgb"], tmpl))
    grid = None
    if "grid" in doc:
        g = doc["grid"]
        grid = Grid(g["start"], g["step"], g["depth"])
    d = SpectralDictionary(entries, grid)
    if d.depth != doc["depth"]:
        raise ValueError(f"templates have depth {d.depth}, header says {doc['depth']}")
    return d


def save_dictionary(d: SpectralDictionary, path) -> None:
    doc = {
        "depth": d.depth,
        "entries": [
            {"label": e.label, "rgb": list(e.rgb), "template": [float(v) for v in e.template]}
            for e in d.entries
        ],
    }
    if d.grid is not None:
        doc["grid"] = {"start": d.grid.start, "step": d.grid.step, "depth": d.grid.depth}
    Path(path).write_text(json.dumps(doc) + "\n")


@dataclass
class GenConfig:
    """Seeded-cube settings.

    ``noise`` is ``"poisson"`` (counts drawn around ``template * counts_scale``)
    or ``"gaussian"`` (additive noise of ``noise_std``). Background pixels
    get pure noise around ``background_level * counts_scale``.
    """

    rgb_threshold: float = 0.2
    counts_scale: float = 1.0
    seed: int = 0
    noise: str = "poisson"
    noise_std: float = 0.0
    background_level: float = 0.0
    rgb_krange: tuple = (2, 8)
    rgb_silhouette_cap: int = 2048

    def __post_init__(self):
        if not 0 < self.rgb_threshold <= 1:
            raise ValueError("rgb_threshold must be in (0, 1]")
        if self.counts_scale <= 0:
            raise ValueError("counts_scale must be positive")
        if self.noise not in ("poisson", "gaussian"):
            raise ValueError(f"unknown noise model {self.noise!r}")
        self.rgb_krange = tuple(self.rgb_krange)


@dataclass
class LabeledCube:
    cube: DataCube
    labels: np.ndarray  # (height, width) legend indices
    legend: list  # legend index -> label text
    rgb_centroids: np.ndarray = field(default=None)

    def legend_dict(self) -> dict:
        return {"legend": [{"index": i, "label": l} for i, l in enumerate(self.legend)]}


def rgb_clusters(rgb_image, cfg: GenConfig):
    """Cluster image colours and merge centroids closer than the threshold.

    Returns per-pixel cluster ids (``(height, width)``) and the merged
    centroids. Distances are normalised by the RGB cube diagonal.
    """
    rgb = np.asarray(rgb_image, dtype=np.float64)
    pixels = rgb.reshape(-1, 3)
    colors, inverse = np.unique(pixels, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    lo, hi = cfg.rgb_krange
    if len(colors) <= hi:
        # few enough distinct colours to keep each one exactly
        centroids, labels = colors, inverse
    else:
        res = iterative_kmeans(pixels, KRange(lo, hi), seed=cfg.seed,
                               silhouette_cap=cfg.rgb_silhouette_cap)
        centroids, labels = res.centroids, res.assignments
    # union-find merge of near-identical centroids
    parent = list(range(len(centroids)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(len(centroids)):
        for b in range(a + 1, len(centroids)):
            if np.linalg.norm(centroids[a] - centroids[b]) / RGB_DIAGONAL < cfg.rgb_threshold:
                parent[find(b)] = find(a)
    roots = sorted({find(a) for a in range(len(centroids))})
    remap = np.array([roots.index(find(a)) for a in range(len(centroids))])
    merged_labels = remap[labels]
    merged = np.stack([pixels[merged_labels == r].mean(axis=0) for r in range(len(roots))])
    return merged_labels.reshape(rgb.shape[:2]), merged


def generate_cube(rgb_image, dictionary: SpectralDictionary, cfg: GenConfig,
                  channel_unit: str = "channel") -> LabeledCube:
    """Datacube whose pixels carry the spectrum of their colour's dictionary entry.

    RGB clusters farther than ``rgb_threshold`` from every entry become
    background. Each pixel draws its noise from its own stream derived from
    ``(seed, pixel id)``.
    """
    rgb = np.asarray(rgb_image)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.shape[0] == 0 or rgb.shape[1] == 0:
        raise ValueError(f"expected a non-empty (height, width, 3) image, got {rgb.shape}")
    if not dictionary.entries:
        raise ValueError("spectral dictionary is empty")
    cluster_img, centroids = rgb_clusters(rgb, cfg)
    entry_colors = dictionary.colors
    dist = np.linalg.norm(centroids[:, None, :] - entry_colors[None, :, :], axis=2) / RGB_DIAGONAL
    nearest = np.argmin(dist, axis=1)
    matched = dist[np.arange(len(centroids)), nearest] < cfg.rgb_threshold

    legend = [e.label for e in dictionary.entries] + [BACKGROUND]
    bg = len(dictionary.entries)
    cluster_to_label = np.where(matched, nearest, bg)
    labels = cluster_to_label[cluster_img]

    h, w = labels.shape
    depth = dictionary.depth
    means = np.vstack([np.stack([e.template for e in dictionary.entries]),
                       np.full((1, depth), cfg.background_level)]) * cfg.counts_scale
    data = np.empty((h * w, depth), dtype=np.float32)
    flat_labels = labels.reshape(-1)
    for pid in range(h * w):
        rng = np.random.default_rng([cfg.seed, pid])
        mu = means[flat_labels[pid]]
        if cfg.noise == "poisson":
            data[pid] = rng.poisson(mu)
        else:
            data[pid] = mu + rng.normal(0.0, cfg.noise_std, depth)
    grid = dictionary.grid
    cube = DataCube(
        data.reshape(h, w, depth), channel_unit,
        grid.start if grid else 0.0, grid.step if grid else 1.0,
    )
    return LabeledCube(cube, labels.astype(np.int32), legend, centroids)


def purity(labels_true, masks) -> float:
    """Fraction of pixels whose mask's majority ground-truth label matches their own."""
    labels_true = np.asarray(labels_true)
    masks = np.asarray(masks, dtype=bool)
    if masks.shape[1:] != labels_true.shape:
        raise ShapeError(f"mask shape {masks.shape[1:]} != label shape {labels_true.shape}")
    flat = labels_true.reshape(-1)
    _, codes = np.unique(flat, return_inverse=True)
    total = 0
    for m in masks:
        members = codes[m.reshape(-1)]
        if members.size:
            total += int(np.bincount(members).max())
    return total / flat.size


# -- built-in demo material ------------------------------------------------------

# Optical lines (Angstrom) in the MUSE range used for the astro demo set.
ASTRO_LINES = {
    "Hb": 4861.3, "[OIII]4959": 4958.9, "[OIII]5007": 5006.8, "[NI]5200": 5199.0,
    "HeI5876": 5875.6, "[OI]6300": 6300.3, "[NII]6548": 6548.0, "Ha": 6562.8,
    "[NII]6584": 6583.5, "[SII]6717": 6716.4, "[SII]6731": 6730.8, "[ArIII]7136": 7135.8,
    "[SIII]9069": 9068.6,
}

# Relative line intensities (Hb = 1) of two base models per class; mixing
# any two of them spans the class.
ASTRO_MODELS = {
    "HII": [
        {"Hb": 1.0, "[OIII]4959": 0.15, "[OIII]5007": 0.45, "HeI5876": 0.11, "[OI]6300": 0.01,
         "[NII]6548": 0.10, "Ha": 2.86, "[NII]6584": 0.30, "[SII]6717": 0.12,
         "[SII]6731": 0.09, "[ArIII]7136": 0.08, "[SIII]9069": 0.25},
        {"Hb": 1.0, "[OIII]4959": 0.35, "[OIII]5007": 1.05, "HeI5876": 0.12, "[OI]6300": 0.02,
         "[NII]6548": 0.07, "Ha": 2.86, "[NII]6584": 0.20, "[SII]6717": 0.10,
         "[SII]6731": 0.07, "[ArIII]7136": 0.10, "[SIII]9069": 0.30},
    ],
    "PN": [
        {"Hb": 1.0, "[OIII]4959": 2.0, "[OIII]5007": 6.0, "HeI5876": 0.15, "[OI]6300": 0.05,
         "[NII]6548": 0.25, "Ha": 2.86, "[NII]6584": 0.75, "[SII]6717": 0.05,
         "[SII]6731": 0.08, "[ArIII]7136": 0.15, "[SIII]9069": 0.20},
        {"Hb": 1.0, "[OIII]4959": 2.7, "[OIII]5007": 8.0, "HeI5876": 0.18, "[OI]6300": 0.10,
         "[NII]6548": 0.40, "Ha": 2.86, "[NII]6584": 1.20, "[SII]6717": 0.08,
         "[SII]6731": 0.12, "[ArIII]7136": 0.20, "[SIII]9069": 0.25},
    ],
    "shock": [
        {"Hb": 0.8, "[OIII]5007": 0.4, "[OI]6300": 0.6, "[NII]6548": 0.6, "Ha": 3.0,
         "[NII]6584": 1.8, "[SII]6717": 6.0, "[SII]6731": 5.0},
        {"Hb": 0.8, "[OIII]5007": 0.6, "[OI]6300": 0.9, "[NII]6548": 0.8, "Ha": 3.0,
         "[NII]6584": 2.4, "[SII]6717": 7.5, "[SII]6731": 6.5},
    ],
}
ASTRO_COLORS = {"HII": (255, 0, 0), "PN": (0, 255, 0), "shock": (0, 0, 255)}


def astro_grid(depth: int = 1024) -> Grid:
    start, stop = 4750.0, 9350.0
    return Grid(start, (stop - start) / (depth - 1), depth)


def astro_line_list(intensities: dict, grid: Grid, sigma_instrumental: float = 2.5,
                    sigma_physical_range=(0.5, 3.0), noise_std: float = 0.0,
                    total_flux: float = 100.0) -> LineList:
    """Line list with relative ``intensities`` rescaled to a fixed total flux."""
    norm = total_flux / sum(intensities.values())
    lines = [(ASTRO_LINES[name], norm * f)
             for name, f in sorted(intensities.items(), key=lambda kv: ASTRO_LINES[kv[0]])]
    return LineList(lines, grid, sigma_instrumental, tuple(sigma_physical_range), noise_std)


def _full_intensities(model: dict) -> dict:
    return {name: float(model.get(name, 0.0)) for name in ASTRO_LINES}


def astro_spectra(n: int, grid: Grid | None = None, seed=0, noise_std: float = 0.02,
                  classes=("HII", "PN", "shock"), background_fraction: float = 0.0):
    """``n`` labelled astro-like spectra, balanced over ``classes``.

    Each spectrum mixes the two base models of its class with a random
    weight, draws a physical line width and adds Gaussian noise. A
    ``background_fraction`` of the rows is pure noise, labelled ``"background"``.
    """
    if not 0.0 <= background_fraction < 1.0:
        raise ValueError("background_fraction must be in [0, 1)")
    grid = grid or astro_grid()
    rng = np.random.default_rng(seed)
    spectra = np.empty((n, grid.depth), dtype=np.float32)
    n_bg = int(round(background_fraction * n))
    labels = np.concatenate([np.arange(n - n_bg) % len(classes),
                             np.full(n_bg, len(classes))])
    rng.shuffle(labels)
    names = list(classes) + ([BACKGROUND] if n_bg else [])
    for i, c in enumerate(labels):
        if c == len(classes):
            spectra[i] = rng.normal(0.0, noise_std, grid.depth) if noise_std > 0 else 0.0
            continue
        a, b = (astro_line_list(_full_intensities(m), grid, noise_std=noise_std)
                for m in ASTRO_MODELS[classes[c]])
        spectra[i] = synth_line_spectrum(mix_line_lists(a, b, rng), rng)
    return spectra, labels, names


def astro_dictionary(grid: Grid | None = None, seed=0) -> SpectralDictionary:
    """One noiseless representative spectrum per astro class, coloured R/G/B."""
    grid = grid or astro_grid()
    rng = np.random.default_rng(seed)
    entries = []
    for name in ("HII", "PN", "shock"):
        a, b = (astro_line_list(_full_intensities(m), grid) for m in ASTRO_MODELS[name])
        tmpl = synth_line_spectrum(mix_line_lists(a, b, rng), rng)
        entries.append(DictionaryEntry(name, ASTRO_COLORS[name], tmpl))
    return SpectralDictionary(entries, grid)


# X-ray emission energies (keV) of the elements used by the demo pigments.
XRF_LINES = {
    "Ca": [(3.69, 1.0), (4.01, 0.13)],
    "Fe": [(6.40, 1.0), (7.06, 0.13)],
    "Cu": [(8.05, 1.0), (8.90, 0.14)],
    "Hg": [(9.99, 1.0), (11.82, 0.75), (2.20, 0.4)],
    "S": [(2.31, 1.0)],
    "Pb": [(10.55, 1.0), (12.61, 0.85), (2.35, 0.5)],
    "Ar": [(2.96, 1.0)],
}

XRF_PIGMENTS = {
    "lead white": ((235, 235, 225), {"Pb": 1.0, "Ca": 0.05}),
    "vermilion": ((200, 30, 30), {"Hg": 1.0, "S": 0.4}),
    "azurite": ((30, 60, 200), {"Cu": 1.0, "Ca": 0.1}),
    "yellow ochre": ((210, 170, 40), {"Fe": 1.0, "Ca": 0.3}),
}


def xrf_grid(depth: int = 512) -> Grid:
    return Grid(0.0, 20.48 / depth, depth)


def xrf_template(elements: dict, grid: Grid, resolution: float = 0.07,
                 continuum: float = 0.15) -> np.ndarray:
    """Unit-sum XRF-like template: element peaks, air argon and a smooth continuum."""
    e = grid.axis
    out = np.zeros(grid.depth)
    for el, weight in {**elements, "Ar": 0.05}.items():
        for energy, rel in XRF_LINES[el]:
            out += weight * rel * gaussian_profile(e, energy, resolution) * grid.step
    bump = np.exp(-0.5 * ((e - 14.0) / 4.0) ** 2) * (e > 1.0)
    out += continuum * bump / bump.sum()
    return out / out.sum()


def xrf_dictionary(grid: Grid | None = None, names=None) -> SpectralDictionary:
    grid = grid or xrf_grid()
    names = names or list(XRF_PIGMENTS)
    entries = [DictionaryEntry(n, XRF_PIGMENTS[n][0], xrf_template(XRF_PIGMENTS[n][1], grid))
               for n in names]
    return SpectralDictionary(entries, grid)


def tricolor_image(width: int = 64, height: int = 64) -> np.ndarray:
    """Black background with a red disc, a green ring and a blue bar."""
    yy, xx = np.mgrid[0:height, 0:width]
    u, v = xx / width, yy / height
    img = np.zeros((height, width, 3), dtype=np.uint8)
    r_disc = (u - 0.3) ** 2 + (v - 0.3) ** 2 < 0.18 ** 2
    ring_d = np.sqrt((u - 0.68) ** 2 + (v - 0.62) ** 2)
    g_ring = (ring_d > 0.12) & (ring_d < 0.25)
    b_bar = (u > 0.1) & (u < 0.45) & (v > 0.72) & (v < 0.88)
    img[r_disc] = ASTRO_COLORS["HII"]
    img[g_ring] = ASTRO_COLORS["PN"]
    img[b_bar] = ASTRO_COLORS["shock"]
    return img


def blob_image(width: int, height: int, colors, seed=0, n_sites: int = 12,
               jitter: float = 0.0) -> np.ndarray:
    """Voronoi mosaic of ``colors`` with every colour used at least once.

    ``jitter`` adds uniform per-pixel colour noise of that amplitude.
    """
    rng = np.random.default_rng(seed)
    colors = np.asarray(colors, dtype=np.float64)
    n_sites = max(n_sites, len(colors))
    sites = rng.uniform(0, 1, (n_sites, 2)) * [width, height]
    site_color = np.concatenate([np.arange(len(colors)),
                                 rng.integers(len(colors), size=n_sites - len(colors))])
    yy, xx = np.mgrid[0:height, 0:width]
    d = (xx[..., None] - sites[:, 0]) ** 2 + (yy[..., None] - sites[:, 1]) ** 2
    img = colors[site_color[np.argmin(d, axis=2)]]
    if jitter > 0:
        img = img + rng.uniform(-jitter, jitter, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def load_rgb(path) -> np.ndarray:
    """RGB seed image (PNG, binary PPM or anything Pillow reads) as ``uint8 (h, w, 3)``."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_rgb(path, image) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8), "RGB").save(path)
