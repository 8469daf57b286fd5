"""Deep clustering objective and training loop.

The total loss at epoch ``i`` is ``L_rec + beta(i) * L_mmd + gamma(i) * L_sil``
where ``L_sil = (1 - silhouette) / 2`` of the iterative K-Means clustering of
the latent batch and ``L_mmd`` matches the latent batch to a standard normal.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from sdcn import clustering
from sdcn.autoencoder import ArchitectureSpec, AutoEncoderModel, build_autoencoder
from sdcn.clustering import Init, KRange
from sdcn.errors import PoisonedStateError, ShapeError
from sdcn.nn import Adam, mse_grad, mse_loss, optimizer_step

log = logging.getLogger(__name__)


# -- schedules ---------------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, epoch: int) -> float:
        return self.value


@dataclass(frozen=True)
class Step:
    """``value * Theta(epoch - start)`` with Theta(0) = 1."""

    value: float
    start: int

    def __call__(self, epoch: int) -> float:
        return self.value if epoch >= self.start else 0.0


@dataclass(frozen=True)
class Piecewise:
    """Value of the last ``(epoch, value)`` breakpoint at or before ``epoch``; 0 before the first."""

    points: tuple

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(sorted((int(e), float(v)) for e, v in self.points)))

    def __call__(self, epoch: int) -> float:
        out = 0.0
        for e, v in self.points:
            if epoch >= e:
                out = v
        return out


def schedule_from_config(cfg):
    """Build a schedule from a number or a ``{"kind": ...}`` mapping."""
    if isinstance(cfg, (int, float)):
        return Constant(float(cfg))
    if isinstance(cfg, (Constant, Step, Piecewise)):
        return cfg
    kind = cfg.get("kind")
    extra = set(cfg) - {"kind", "value", "start", "points"}
    if extra:
        raise ValueError(f"unknown schedule keys: {sorted(extra)}")
    if kind == "constant":
        return Constant(float(cfg["value"]))
    if kind == "step":
        return Step(float(cfg["value"]), int(cfg["start"]))
    if kind == "piecewise":
        return Piecewise(tuple(cfg["points"]))
    raise ValueError(f"unknown schedule kind {kind!r}")


def schedule_to_config(s) -> dict:
    if isinstance(s, Constant):
        return {"kind": "constant", "value": s.value}
    if isinstance(s, Step):
        return {"kind": "step", "value": s.value, "start": s.start}
    return {"kind": "piecewise", "points": [list(p) for p in s.points]}


@dataclass
class LossWeightsSchedule:
    gamma: object = field(default_factory=lambda: Constant(0.0))
    beta: object = field(default_factory=lambda: Constant(0.0))

    def __post_init__(self):
        self.gamma = schedule_from_config(self.gamma)
        self.beta = schedule_from_config(self.beta)


# -- silhouette loss -----------------------------------------------------------

def silhouette_with_grad(z, labels):
    """Silhouette of a fixed labelling and its gradient with respect to ``z``.

    Assignments, the nearest-other-cluster choice and the max(a, b) branch
    are held fixed; gradients flow through the pairwise distances only.
    Coincident pairs contribute a zero subgradient.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(z)
    counts = np.bincount(labels)
    k = len(counts)
    if k < 2 or np.any(counts == 0):
        raise ValueError("need at least two non-empty clusters")
    dist = cdist(z, z)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    sums = dist @ onehot
    idx = np.arange(n)
    own = counts[labels]
    a = np.where(own > 1, sums[idx, labels] / np.maximum(own - 1, 1), 0.0)
    means = sums / counts[None, :]
    means[idx, labels] = np.inf
    nearest = np.argmin(means, axis=1)
    b = means[idx, nearest]
    active = (own > 1) & (np.maximum(a, b) > 0)
    s = np.zeros(n)
    ds_da = np.zeros(n)
    ds_db = np.zeros(n)
    lo = active & (a < b)
    hi = active & ~lo
    s[lo] = 1.0 - a[lo] / b[lo]
    ds_da[lo] = -1.0 / b[lo]
    ds_db[lo] = a[lo] / b[lo] ** 2
    s[hi] = b[hi] / a[hi] - 1.0
    ds_da[hi] = -b[hi] / a[hi] ** 2
    ds_db[hi] = 1.0 / a[hi]
    w = 1.0 / (k * own)
    score = float(np.sum(w * s))
    # dS/d dist[i, j] for the ordered pair (i, j)
    same = onehot[:, labels]  # same[i, j] = label_i == label_j
    np.fill_diagonal(same, 0.0)
    g = (w * ds_da / np.maximum(own - 1, 1))[:, None] * same
    g += (w * ds_db / counts[nearest])[:, None] * (labels[None, :] == nearest[:, None])
    g = g + g.T
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(dist > 0, g / dist, 0.0)
    grad = coef.sum(axis=1)[:, None] * z - coef @ z
    return score, grad


@dataclass
class SilhouetteLoss:
    value: float
    grad: np.ndarray
    clustering: clustering.ClusteringResult
    indices: np.ndarray


def silhouette_loss(latent, krange: KRange, init=Init.KPLUSPLUS, seed=0,
                    cap: int | None = 1024) -> SilhouetteLoss:
    """``(1 - silhouette) / 2`` of the iterative K-Means clustering of ``latent``.

    ``grad`` has the shape of ``latent``; rows outside the silhouette
    subsample get zero gradient.
    """
    z = np.asarray(latent, dtype=np.float64)
    if len(z) < krange.n_f + 1:
        raise ValueError(f"batch of {len(z)} points is too small for krange up to {krange.n_f}")
    idx = np.arange(len(z)) if cap is None else clustering.subsample_for_silhouette(z, cap, seed)
    sub = z[idx]
    res = clustering.iterative_kmeans(sub, krange, init=init, seed=seed)
    score, g = silhouette_with_grad(sub, res.assignments)
    grad = np.zeros_like(z)
    grad[idx] = -0.5 * g
    return SilhouetteLoss((1.0 - score) / 2.0, grad, res, idx)


# -- MMD -----------------------------------------------------------------------

@dataclass
class MmdConfig:
    """Gaussian RBF ``k(x, y) = exp(-|x - y|^2 / bandwidth^2)``.

    ``bandwidth=None`` means ``bandwidth^2 = latent_dim`` unless
    ``median_heuristic`` is set, in which case ``bandwidth^2`` is the median
    squared distance of the pooled sample. ``prior_samples=None`` draws as
    many prior points as there are latent points.
    """

    bandwidth: float | None = None
    median_heuristic: bool = False
    prior_samples: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.prior_samples is not None and self.prior_samples < 2:
            raise ValueError("prior_samples must be >= 2")


def _bandwidth_sq(cfg: MmdConfig, q, p) -> float:
    if cfg.bandwidth is not None:
        return float(cfg.bandwidth) ** 2
    if cfg.median_heuristic:
        pooled = np.concatenate([q, p])
        d2 = cdist(pooled, pooled, "sqeuclidean")
        off = d2[np.triu_indices(len(pooled), 1)]
        med = float(np.median(off)) if off.size else 0.0
        return med if med > 0 else float(q.shape[1])
    return float(q.shape[1])


def mmd_with_grad(latent, prior, cfg: MmdConfig):
    """Biased (V-statistic) MMD between ``latent`` and ``prior`` and d/d latent."""
    q = np.asarray(latent, dtype=np.float64)
    p = np.asarray(prior, dtype=np.float64)
    if q.ndim != 2 or p.ndim != 2 or q.shape[1] != p.shape[1]:
        raise ShapeError(f"latent {q.shape} and prior {p.shape} are incompatible")
    if len(q) < 2:
        raise ValueError("MMD needs at least two latent points")
    h2 = _bandwidth_sq(cfg, q, p)
    k_qq = np.exp(-cdist(q, q, "sqeuclidean") / h2)
    k_qp = np.exp(-cdist(q, p, "sqeuclidean") / h2)
    k_pp = np.exp(-cdist(p, p, "sqeuclidean") / h2)
    n, m = len(q), len(p)
    value = k_pp.mean() - 2.0 * k_qp.mean() + k_qq.mean()
    # d k(x, y) / dx = -2 (x - y) k / h2
    g_qq = (k_qq.sum(axis=1)[:, None] * q - k_qq @ q) * (-2.0 / h2)
    g_qp = (k_qp.sum(axis=1)[:, None] * q - k_qp @ p) * (-2.0 / h2)
    grad = (2.0 / n ** 2) * g_qq - (2.0 / (n * m)) * g_qp
    return float(value), grad


def draw_prior(n: int, dim: int, rng) -> np.ndarray:
    return rng.standard_normal((n, dim))


def mmd_loss(latent, cfg: MmdConfig, prior=None, rng=None) -> float:
    """MMD(latent || N(0, I)); fresh prior draws unless ``prior`` is given."""
    q = np.asarray(latent, dtype=np.float64)
    if prior is None:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        prior = draw_prior(cfg.prior_samples or len(q), q.shape[1], rng)
    return mmd_with_grad(q, prior, cfg)[0]


# -- total loss ----------------------------------------------------------------

class TrainVariant(str, enum.Enum):
    DCN = "dcn"
    VADE_MMD = "vade-mmd"


@dataclass
class LossBreakdown:
    total: float
    l_rec: float
    l_mmd: float | None
    l_sil: float | None
    beta: float
    gamma: float
    silhouette_k: int | None = None


def loss_and_backward(model: AutoEncoderModel, x, schedule: LossWeightsSchedule,
                      mmd_cfg: MmdConfig, epoch: int, *, krange: KRange = KRange(2, 8),
                      init=Init.KPLUSPLUS, rng=None, training: bool = True,
                      silhouette_cap: int | None = 1024, variant=TrainVariant.VADE_MMD,
                      prior=None, kmeans_seed=None, backward: bool = True) -> LossBreakdown:
    """Forward the batch, evaluate the total loss and fill both gradient tapes.

    Terms whose weight is zero at ``epoch`` are skipped and reported as None.
    ``x`` is expected in network units (already divided by ``model.scale``).
    """
    variant = TrainVariant(variant)
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=model.dtype)
    beta = schedule.beta(epoch) if variant is TrainVariant.VADE_MMD else 0.0
    gamma = schedule.gamma(epoch)
    enc, dec = model.encoder, model.decoder
    z = enc.forward(x, training=training, rng=rng)
    x_rec = dec.forward(z, training=training, rng=rng)
    l_rec = mse_loss(x, x_rec)
    total = l_rec
    grad_z = np.zeros(z.shape, dtype=np.float64)
    l_mmd = l_sil = None
    sil_k = None
    if beta != 0.0:
        if prior is None:
            prior = draw_prior(mmd_cfg.prior_samples or len(z), z.shape[1], rng)
        l_mmd, g = mmd_with_grad(z, prior, mmd_cfg)
        total += beta * l_mmd
        grad_z += beta * g
    if gamma != 0.0:
        seed = kmeans_seed if kmeans_seed is not None else int(rng.integers(2 ** 31))
        sil = silhouette_loss(z, krange, init=init, seed=seed, cap=silhouette_cap)
        l_sil = sil.value
        sil_k = sil.clustering.k
        total += gamma * l_sil
        grad_z += gamma * sil.grad
    if not math.isfinite(total):
        raise PoisonedStateError(f"non-finite loss at epoch {epoch}")
    if backward:
        enc.zero_grad()
        dec.zero_grad()
        g_z = dec.backward(mse_grad(x, x_rec))
        enc.backward(g_z + grad_z.astype(g_z.dtype, copy=False))
    return LossBreakdown(total, l_rec, l_mmd, l_sil, beta, gamma, sil_k)


def total_loss(x, model: AutoEncoderModel, schedule: LossWeightsSchedule, mmd_cfg: MmdConfig,
               epoch: int, **kw) -> LossBreakdown:
    """Deterministic-inference evaluation of the total loss (no dropout, no backward)."""
    kw.setdefault("training", False)
    return loss_and_backward(model, x, schedule, mmd_cfg, epoch, backward=False, **kw)


# -- training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    learning_rate: float = 1e-3
    silhouette_cap: int = 1024
    krange: tuple = (2, 8)
    variant: TrainVariant = TrainVariant.DCN
    gamma: object = 0.0
    beta: object = 0.0
    mmd: MmdConfig = field(default_factory=MmdConfig)
    validation_fraction: float = 0.1
    input_scale: object = "auto"
    init: Init = Init.KPLUSPLUS

    def __post_init__(self):
        self.variant = TrainVariant(self.variant)
        self.init = Init(self.init)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if isinstance(self.mmd, dict):
            self.mmd = MmdConfig(**self.mmd)
        self.krange = tuple(self.krange)
        KRange(*self.krange)

    def schedule(self) -> LossWeightsSchedule:
        return LossWeightsSchedule(gamma=self.gamma, beta=self.beta)


@dataclass
class TrainResult:
    model: AutoEncoderModel
    log: list
    best_epoch: int


def _auto_scale(x) -> float:
    peaks = np.max(np.abs(x), axis=1)
    s = float(np.mean(peaks))
    return s if s > 0 else 1.0


def _validate(model, x_val, schedule, cfg, epoch, final_epoch, rng_seed):
    """Validation metrics; the selection score uses the final-epoch loss weights."""
    z = model.encoder.predict(x_val)
    x_rec = model.decoder.predict(z)
    val_rec = mse_loss(x_val, x_rec)
    krange = KRange(*cfg.krange)
    res = clustering.iterative_kmeans(
        z, krange, init=cfg.init, seed=rng_seed, silhouette_cap=cfg.silhouette_cap
    )
    val_sil = res.silhouette
    beta_f = schedule.beta(final_epoch) if cfg.variant is TrainVariant.VADE_MMD else 0.0
    gamma_f = schedule.gamma(final_epoch)
    score = val_rec + gamma_f * (1.0 - val_sil) / 2.0
    if beta_f:
        prior = draw_prior(len(z), z.shape[1], np.random.default_rng(rng_seed))
        score += beta_f * mmd_with_grad(z, prior, cfg.mmd)[0]
    return val_rec, val_sil, score


def train(dataset, spec: ArchitectureSpec, cfg: TrainConfig, validation=None,
          log_path=None, quiet: bool = True) -> TrainResult:
    """Train an autoencoder on ``dataset`` (rows are spectra) and return the best model.

    Without an explicit ``validation`` set, a seeded ``validation_fraction``
    of the rows is held out. The best epoch minimises the validation loss
    evaluated with the final epoch's loss weights, so epochs before and after
    a schedule step are compared on the same objective.
    """
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 2 or data.shape[1] != spec.input_dim:
        raise ShapeError(f"dataset shape {data.shape} does not match input_dim {spec.input_dim}")
    if not np.all(np.isfinite(data)):
        raise ValueError("dataset contains non-finite values")
    ss = np.random.SeedSequence(cfg.seed)
    split_seed, init_seed, shuffle_seed, noise_seed, val_seed = ss.generate_state(5)
    if validation is None:
        perm = np.random.default_rng(split_seed).permutation(len(data))
        n_val = max(cfg.krange[1] + 1, int(round(cfg.validation_fraction * len(data))))
        validation, data = data[perm[:n_val]], data[perm[n_val:]]
    validation = np.asarray(validation, dtype=np.float32)

    model = build_autoencoder(spec, int(init_seed))
    if cfg.input_scale == "auto":
        model.scale = _auto_scale(data)
    else:
        model.scale = float(cfg.input_scale)
    inv = np.float32(1.0 / model.scale)
    x_train = data * inv
    x_val = validation * inv

    schedule = cfg.schedule()
    opt = Adam(learning_rate=cfg.learning_rate)
    krange = KRange(*cfg.krange)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    noise_rng = np.random.default_rng(noise_seed)
    final_epoch = cfg.epochs - 1

    records = []
    best, best_score, best_epoch = model.copy(), math.inf, -1
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(len(x_train))
            sums = {"l_rec": 0.0, "l_mmd": 0.0, "l_sil": 0.0}
            seen = {"l_mmd": 0, "l_sil": 0}
            n_batches = 0
            min_batch = krange.n_f + 1 if schedule.gamma(epoch) else 2
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                if len(idx) < min_batch:
                    continue
                try:
                    br = loss_and_backward(
                        model, x_train[idx], schedule, cfg.mmd, epoch, krange=krange,
                        init=cfg.init, rng=noise_rng, silhouette_cap=cfg.silhouette_cap,
                        variant=cfg.variant,
                    )
                    optimizer_step(model.networks, opt)
                except PoisonedStateError as exc:
                    raise PoisonedStateError(f"training aborted at epoch {epoch}: {exc}",
                                             checkpoint=best) from exc
                n_batches += 1
                sums["l_rec"] += br.l_rec
                for key in ("l_mmd", "l_sil"):
                    v = getattr(br, key)
                    if v is not None:
                        sums[key] += v
                        seen[key] += 1
            val_rec, val_sil, score = _validate(
                model, x_val, schedule, cfg, epoch, final_epoch, int(val_seed)
            )
            if not math.isfinite(score):
                raise PoisonedStateError(f"non-finite validation loss at epoch {epoch}",
                                         checkpoint=best)
            if score < best_score:
                best, best_score, best_epoch = model.copy(), score, epoch
            rec = {
                "epoch": epoch,
                "l_rec": sums["l_rec"] / max(n_batches, 1),
                "l_sil": sums["l_sil"] / seen["l_sil"] if seen["l_sil"] else None,
                "l_mmd": sums["l_mmd"] / seen["l_mmd"] if seen["l_mmd"] else None,
                "beta": schedule.beta(epoch) if cfg.variant is TrainVariant.VADE_MMD else 0.0,
                "gamma": schedule.gamma(epoch),
                "val_l_rec": val_rec,
                "val_silhouette": val_sil,
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            }
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            if not quiet:
                log.info("epoch %d l_rec=%.5g val_l_rec=%.5g val_sil=%.4f",
                         epoch, rec["l_rec"], val_rec, val_sil)
    finally:
        if log_file is not None:
            log_file.close()
    best.metadata = {
        "best_epoch": best_epoch,
        "epochs": cfg.epochs,
        "train_seed": cfg.seed,
        "variant": cfg.variant.value,
        "gamma": schedule_to_config(schedule.gamma),
        "beta": schedule_to_config(schedule.beta),
        "n_train": int(len(x_train)),
        "n_validation": int(len(x_val)),
    }
    return TrainResult(best, records, best_epoch)
