"""Mirrored encoder/decoder pair: layer sizing, inference and the model file."""

from __future__ import annotations

import copy
import enum
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from sdcn import _container
from sdcn.errors import FormatError, InvalidArchitectureError, ShapeError
from sdcn.nn import Activation, DenseLayer, Network, kaiming_init

MODEL_MAGIC = b"SDCN"
MODEL_VERSION = 1


class SizingRule(str, enum.Enum):
    HALF_K = "half_k"
    POW2 = "pow2"
    EXPLICIT = "explicit"


class Variant(str, enum.Enum):
    MLP = "mlp"
    SNN = "snn"


@dataclass
class ArchitectureSpec:
    """Encoder/decoder layout.

    ``explicit_sizes`` is the encoder chain from the input down to (but not
    including) the latent layer. ``decoder_sizes`` optionally gives an
    asymmetric decoder chain ``[latent, ..., input]``; by default the decoder
    mirrors the encoder.
    """

    input_dim: int
    latent_dim: int
    sizing_rule: SizingRule = SizingRule.POW2
    n_hidden: int = 2
    explicit_sizes: list | None = None
    decoder_sizes: list | None = None
    variant: Variant = Variant.SNN
    dropout_p: float = 0.0

    def __post_init__(self):
        self.sizing_rule = SizingRule(self.sizing_rule)
        self.variant = Variant(self.variant)
        if self.input_dim < 1 or self.latent_dim < 1:
            raise InvalidArchitectureError("input_dim and latent_dim must be positive")
        if self.latent_dim >= self.input_dim:
            raise InvalidArchitectureError(
                f"latent_dim ({self.latent_dim}) must be smaller than input_dim ({self.input_dim})"
            )
        if self.variant is Variant.SNN and self.dropout_p > 0:
            raise InvalidArchitectureError("dropout is only available for the MLP variant")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InvalidArchitectureError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sizing_rule"] = self.sizing_rule.value
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d)


def _strictly_decreasing(chain) -> bool:
    return all(a > b for a, b in zip(chain, chain[1:]))


def plan_layer_sizes(spec: ArchitectureSpec) -> list:
    """Encoder size chain ``[input, h_1, ..., h_L, latent]``.

    HALF_K uses ``h_k = input // (2k)`` and POW2 ``h_k = input // 2**k``; a
    rule-generated chain stops early once a hidden size would drop below
    ``2 * latent_dim``.
    """
    n, d = spec.latent_dim, spec.input_dim
    if spec.sizing_rule is SizingRule.EXPLICIT:
        if not spec.explicit_sizes:
            raise InvalidArchitectureError("explicit sizing needs explicit_sizes")
        sizes = [int(s) for s in spec.explicit_sizes]
        if sizes[0] != d:
            raise InvalidArchitectureError(
                f"explicit chain starts at {sizes[0]}, expected input_dim {d}"
            )
    else:
        sizes = [d]
        for k in range(1, spec.n_hidden + 1):
            h = d // (2 * k) if spec.sizing_rule is SizingRule.HALF_K else d // 2 ** k
            if h < 2 * n:
                break
            sizes.append(h)
    chain = sizes + [n]
    if not _strictly_decreasing(chain):
        raise InvalidArchitectureError(f"layer chain {chain} is not strictly decreasing")
    return chain


def plan_decoder_sizes(spec: ArchitectureSpec) -> list:
    if spec.decoder_sizes is None:
        return plan_layer_sizes(spec)[::-1]
    chain = [int(s) for s in spec.decoder_sizes]
    if chain[0] != spec.latent_dim or chain[-1] != spec.input_dim:
        raise InvalidArchitectureError(
            f"decoder chain {chain} must run from latent_dim {spec.latent_dim} "
            f"to input_dim {spec.input_dim}"
        )
    if not all(a < b for a, b in zip(chain, chain[1:])):
        raise InvalidArchitectureError(f"decoder chain {chain} is not strictly increasing")
    return chain


def _layer_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def _build_network(chain, spec: ArchitectureSpec, seed: int, net_id: int, name: str, dtype):
    hidden_act = Activation.SELU if spec.variant is Variant.SNN else Activation.RELU
    layers = []
    last = len(chain) - 2
    for i, (a, b) in enumerate(zip(chain, chain[1:])):
        head = i == last
        layers.append(kaiming_init(
            a, b, _layer_seed(seed, net_id, i),
            activation=Activation.IDENTITY if head else hidden_act,
            dropout_p=0.0 if head else spec.dropout_p,
            dtype=dtype,
        ))
    return Network(layers, name)


@dataclass
class AutoEncoderModel:
    """Encoder/decoder networks plus the ArchitectureSpec they were built from.

    ``scale`` divides inputs before encoding and multiplies decoder outputs,
    so the networks see spectra of order one while callers keep raw units.
    """

    encoder: Network
    decoder: Network
    spec: ArchitectureSpec
    seed: int = 0
    scale: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.encoder.out_dim != self.spec.latent_dim or self.decoder.in_dim != self.spec.latent_dim:
            raise ShapeError("encoder output and decoder input must equal latent_dim")
        if self.encoder.in_dim != self.spec.input_dim or self.decoder.out_dim != self.spec.input_dim:
            raise ShapeError("encoder input and decoder output must equal input_dim")

    @property
    def dtype(self):
        return self.encoder.layers[0].weights.dtype

    @property
    def networks(self):
        return (self.encoder, self.decoder)

    def copy(self) -> "AutoEncoderModel":
        return AutoEncoderModel(
            Network([copy.deepcopy(l) for l in self.encoder.layers], "encoder"),
            Network([copy.deepcopy(l) for l in self.decoder.layers], "decoder"),
            copy.deepcopy(self.spec), self.seed, self.scale, copy.deepcopy(self.metadata),
        )

    def astype(self, dtype) -> "AutoEncoderModel":
        return AutoEncoderModel(
            self.encoder.astype(dtype), self.decoder.astype(dtype),
            copy.deepcopy(self.spec), self.seed, self.scale, copy.deepcopy(self.metadata),
        )


def build_autoencoder(spec: ArchitectureSpec, seed: int, dtype=np.float32) -> AutoEncoderModel:
    enc_chain = plan_layer_sizes(spec)
    dec_chain = plan_decoder_sizes(spec)
    encoder = _build_network(enc_chain, spec, seed, 0, "encoder", dtype)
    decoder = _build_network(dec_chain, spec, seed, 1, "decoder", dtype)
    return AutoEncoderModel(encoder, decoder, spec, seed)


def _as_batch(x, dim: int, dtype, what: str):
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what}: expected (batch, {dim}), got {x.shape}")
    return x.astype(dtype, copy=False)


def encode(model: AutoEncoderModel, x, batch_size: int = 4096):
    """Latent coordinates ``Enc[x / scale]`` for a batch of spectra."""
    x = _as_batch(x, model.spec.input_dim, model.dtype, "encode")
    inv = model.dtype.type(1.0 / model.scale)
    out = [model.encoder.predict(x[i:i + batch_size] * inv) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.spec.latent_dim), model.dtype)


def decode(model: AutoEncoderModel, z, batch_size: int = 4096):
    """Reconstructed spectra ``Dec[z] * scale`` for a batch of latent points."""
    z = _as_batch(z, model.spec.latent_dim, model.dtype, "decode")
    s = model.dtype.type(model.scale)
    out = [model.decoder.predict(z[i:i + batch_size]) * s for i in range(0, len(z), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.spec.input_dim), model.dtype)


def save_model(model: AutoEncoderModel, path) -> None:
    """Write ``model`` to ``path``; parameters are stored as little-endian float32."""
    layers, blobs = [], []
    for net in model.networks:
        for layer in net.layers:
            layers.append({
                "net": net.name,
                "in_dim": layer.in_dim,
                "out_dim": layer.out_dim,
                "activation": layer.activation.value,
                "dropout_p": layer.dropout_p,
            })
            blobs.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
            blobs.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    manifest = {
        "architecture": model.spec.to_dict(),
        "seed": model.seed,
        "scale": model.scale,
        "layers": layers,
        "metadata": model.metadata,
    }
    Path(path).write_bytes(_container.pack(MODEL_MAGIC, MODEL_VERSION, manifest, b"".join(blobs)))


def _payload_size(manifest: dict) -> int:
    try:
        return sum(4 * (l["in_dim"] * l["out_dim"] + l["out_dim"]) for l in manifest["layers"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"model manifest is missing layer shapes: {exc}") from exc


def load_model(path) -> AutoEncoderModel:
    manifest, payload = _container.unpack(
        Path(path).read_bytes(), MODEL_MAGIC, MODEL_VERSION, _payload_size
    )
    nets = {"encoder": [], "decoder": []}
    offset = 0
    for l in manifest["layers"]:
        n_w = l["in_dim"] * l["out_dim"]
        w = np.frombuffer(payload, "<f4", n_w, offset).reshape(l["out_dim"], l["in_dim"])
        offset += 4 * n_w
        b = np.frombuffer(payload, "<f4", l["out_dim"], offset)
        offset += 4 * l["out_dim"]
        nets[l["net"]].append(DenseLayer(
            w.astype(np.float32), b.astype(np.float32), l["activation"], l["dropout_p"]
        ))
    return AutoEncoderModel(
        Network(nets["encoder"], "encoder"),
        Network(nets["decoder"], "decoder"),
        ArchitectureSpec.from_dict(manifest["architecture"]),
        manifest["seed"],
        manifest["scale"],
        manifest["metadata"],
    )
