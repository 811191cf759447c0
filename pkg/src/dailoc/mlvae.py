"""Multi-level VAE with domain-aware reparameterization.

The encoder splits an RSS fingerprint into a domain-specific latent (z_D,
modeled as a Gaussian posterior) and a deterministic location-relevant
latent (z_C). Reparameterization does not draw fresh noise per sample:
every domain owns one fixed noise vector, stored in a DomainNoiseBuffer, so
z_D captures coherent domain-level variation. The decoder reconstructs the
input from [z_D, z_C]; a softmax classifier predicts the reference point
from z_C alone.

Loss conventions: all reductions are means over the batch, so the summed
objective is stable across batch sizes. Gradients are hand-derived and are
covered by the finite-difference checker in `nn`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, require_shape
from .nn import Activation, DenseLayer

SIGMA_FLOOR = 1e-6

ENCODER_LAYERS = ("enc1", "enc2", "mu", "sigma", "zc1", "zc2")
DECODER_LAYERS = ("dec1", "dec2", "dec3")
CLASSIFIER_LAYERS = ("clf1", "clf2")
LAYER_ORDER = ENCODER_LAYERS + DECODER_LAYERS + CLASSIFIER_LAYERS
BLOCKS = {
    "encoder": ENCODER_LAYERS,
    "decoder": DECODER_LAYERS,
    "classifier": CLASSIFIER_LAYERS,
}


@dataclass(frozen=True)
class Architecture:
    """Layer widths. Defaults are the deployment-scale network; tests use
    smaller ones (everything scales off these fields)."""

    input_dim: int
    n_rps: int
    trunk: tuple[int, int] = (256, 128)
    latent_dim: int = 16
    class_hidden: int = 64
    decoder_hidden: tuple[int, int] = (128, 256)
    classifier_hidden: int = 64

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "n_rps": self.n_rps,
            "trunk": list(self.trunk),
            "latent_dim": self.latent_dim,
            "class_hidden": self.class_hidden,
            "decoder_hidden": list(self.decoder_hidden),
            "classifier_hidden": self.classifier_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(
            input_dim=int(d["input_dim"]),
            n_rps=int(d["n_rps"]),
            trunk=tuple(d["trunk"]),
            latent_dim=int(d["latent_dim"]),
            class_hidden=int(d["class_hidden"]),
            decoder_hidden=tuple(d["decoder_hidden"]),
            classifier_hidden=int(d["classifier_hidden"]),
        )


@dataclass
class LatentPair:
    """One sample's latents: deterministic z_C plus the z_D posterior."""

    z_c: np.ndarray
    z_d: np.ndarray
    mu_d: np.ndarray
    sigma_d: np.ndarray


def _key_entropy(key) -> int:
    """Stable 64-bit entropy for a domain key, independent of process hashing."""
    device_id, epoch = key
    digest = hashlib.sha256(f"{device_id}\x1f{epoch}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class DomainNoiseBuffer:
    """One fixed reparameterization noise vector per domain.

    A vector is drawn from N(0, I) exactly once, the first time its domain
    key is seen, from a stream derived from (buffer seed, key); lookups are
    referentially stable and entries are immutable afterwards.
    """

    def __init__(self, latent_dim: int, seed: int):
        self.latent_dim = int(latent_dim)
        self.seed = int(seed)
        self._eps: dict[tuple[str, int], np.ndarray] = {}

    def __contains__(self, key) -> bool:
        return (str(key[0]), int(key[1])) in self._eps

    def __len__(self) -> int:
        return len(self._eps)

    def keys(self):
        return self._eps.keys()

    def get_or_create(self, key) -> np.ndarray:
        k = (str(key[0]), int(key[1]))
        if k not in self._eps:
            rng = np.random.default_rng((self.seed, _key_entropy(k)))
            eps = rng.standard_normal(self.latent_dim)
            eps.flags.writeable = False
            self._eps[k] = eps
        return self._eps[k]

    def state(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "seed": self.seed,
            "keys": [[d, e] for (d, e) in self._eps],
            "eps": [self._eps[k] for k in self._eps],
        }

    @classmethod
    def from_state(cls, meta: dict, eps_arrays: list[np.ndarray]) -> "DomainNoiseBuffer":
        buf = cls(meta["latent_dim"], meta["seed"])
        for (device_id, epoch), eps in zip(meta["keys"], eps_arrays):
            arr = np.ascontiguousarray(eps, dtype=np.float64)
            arr.flags.writeable = False
            buf._eps[(str(device_id), int(epoch))] = arr
        return buf


class MlvaeModel:
    """Encoder trunk + dual latent heads + decoder + RP classifier."""

    def __init__(self, arch: Architecture, layers: dict[str, DenseLayer]):
        self.arch = arch
        self.layers = layers

    @classmethod
    def init(cls, arch: Architecture, seed: int) -> "MlvaeModel":
        rng = np.random.default_rng(seed)
        t1, t2 = arch.trunk
        d1, d2 = arch.decoder_hidden
        lat = arch.latent_dim
        spec = {
            "enc1": (arch.input_dim, t1, Activation.RELU),
            "enc2": (t1, t2, Activation.RELU),
            "mu": (t2, lat, Activation.IDENTITY),
            "sigma": (t2, lat, Activation.SOFTPLUS),
            "zc1": (t2, arch.class_hidden, Activation.RELU),
            "zc2": (arch.class_hidden, lat, Activation.IDENTITY),
            "dec1": (2 * lat, d1, Activation.RELU),
            "dec2": (d1, d2, Activation.RELU),
            "dec3": (d2, arch.input_dim, Activation.SIGMOID),
            "clf1": (lat, arch.classifier_hidden, Activation.RELU),
            "clf2": (arch.classifier_hidden, arch.n_rps, Activation.IDENTITY),
        }
        layers = {name: DenseLayer.init(i, o, a, rng) for name, (i, o, a) in spec.items()}
        return cls(arch, layers)

    # -- parameter bookkeeping -------------------------------------------------

    def params(self, blocks=("encoder", "decoder", "classifier")) -> dict[str, np.ndarray]:
        """Live views of the parameter arrays for the requested blocks."""
        out: dict[str, np.ndarray] = {}
        for block in blocks:
            for name in BLOCKS[block]:
                out[f"{name}.w"] = self.layers[name].w
                out[f"{name}.b"] = self.layers[name].b
        return out

    def block_checksum(self, block: str) -> str:
        h = hashlib.sha256()
        for name in BLOCKS[block]:
            h.update(self.layers[name].w.tobytes())
            h.update(self.layers[name].b.tobytes())
        return h.hexdigest()

    def copy(self) -> "MlvaeModel":
        layers = {
            name: DenseLayer(layer.w.copy(), layer.b.copy(), layer.activation)
            for name, layer in self.layers.items()
        }
        return MlvaeModel(self.arch, layers)

    def state(self) -> dict:
        arrays = {}
        for name in LAYER_ORDER:
            arrays[f"{name}.w"] = self.layers[name].w
            arrays[f"{name}.b"] = self.layers[name].b
        return {"arch": self.arch.to_dict(), "arrays": arrays}

    @classmethod
    def from_state(cls, arch_meta: dict, arrays: dict[str, np.ndarray]) -> "MlvaeModel":
        arch = Architecture.from_dict(arch_meta)
        fresh = cls.init(arch, seed=0)
        layers = {}
        for name in LAYER_ORDER:
            ref = fresh.layers[name]
            w = np.ascontiguousarray(arrays[f"{name}.w"], dtype=np.float64)
            b = np.ascontiguousarray(arrays[f"{name}.b"], dtype=np.float64)
            require_shape(f"{name}.w", w.shape, ref.w.shape)
            require_shape(f"{name}.b", b.shape, ref.b.shape)
            layers[name] = DenseLayer(w, b, ref.activation)
        return cls(arch, layers)

    # -- inference ops ----------------------------------------------------------

    def encode(self, x: np.ndarray):
        """x -> (mu_D, sigma_D, z_C); deterministic, batch or single vector."""
        x2, single = _ensure_batch(x, self.arch.input_dim, "encode input")
        h = self.layers["enc2"].apply(self.layers["enc1"].apply(x2))
        mu = self.layers["mu"].apply(h)
        sigma = self.layers["sigma"].apply(h) + SIGMA_FLOOR
        z_c = self.layers["zc2"].apply(self.layers["zc1"].apply(h))
        if single:
            return mu[0], sigma[0], z_c[0]
        return mu, sigma, z_c

    def decode(self, z_d: np.ndarray, z_c: np.ndarray) -> np.ndarray:
        """[z_D, z_C] -> reconstruction in (0, 1); concatenation order is part
        of the trained contract."""
        zd2, single = _ensure_batch(z_d, self.arch.latent_dim, "z_D")
        zc2, single_c = _ensure_batch(z_c, self.arch.latent_dim, "z_C")
        if single != single_c or zd2.shape[0] != zc2.shape[0]:
            raise ShapeError(f"z_D batch {zd2.shape} does not match z_C batch {zc2.shape}")
        z = np.concatenate([zd2, zc2], axis=1)
        xh = self.layers["dec3"].apply(self.layers["dec2"].apply(self.layers["dec1"].apply(z)))
        return xh[0] if single else xh

    def classify(self, z_c: np.ndarray) -> np.ndarray:
        """z_C -> RP probability vector (softmax over logits)."""
        zc2, single = _ensure_batch(z_c, self.arch.latent_dim, "z_C")
        logits = self.layers["clf2"].apply(self.layers["clf1"].apply(zc2))
        probs = softmax(logits)
        return probs[0] if single else probs

    def latent_pair(self, x: np.ndarray, eps: np.ndarray) -> LatentPair:
        mu, sigma, z_c = self.encode(x)
        return LatentPair(z_c=z_c, z_d=mu + sigma * eps, mu_d=mu, sigma_d=sigma)


def _ensure_batch(a, dim: int, name: str):
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ShapeError(f"{name}: expected length {dim}, got {arr.shape[0]}")
        return arr[None, :], True
    if arr.ndim == 2:
        if arr.shape[1] != dim:
            raise ShapeError(f"{name}: expected width {dim}, got {arr.shape[1]}")
        return arr, False
    raise ShapeError(f"{name}: expected 1-D or 2-D array, got ndim={arr.ndim}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def reparameterize_domain(mu_d: np.ndarray, sigma_d: np.ndarray, key,
                          buffer: DomainNoiseBuffer) -> np.ndarray:
    """z_D = mu_D + sigma_D * eps_D, with eps_D looked up (or created once)
    in the domain noise buffer. Repeated calls for a key reuse the identical
    noise vector."""
    eps = buffer.get_or_create(key)
    mu = np.asarray(mu_d, dtype=np.float64)
    sigma = np.asarray(sigma_d, dtype=np.float64)
    if mu.shape != sigma.shape:
        raise ShapeError(f"mu shape {mu.shape} does not match sigma shape {sigma.shape}")
    if mu.shape[-1] != buffer.latent_dim:
        raise ShapeError(
            f"latent width {mu.shape[-1]} does not match buffer dim {buffer.latent_dim}"
        )
    return mu + sigma * eps


# -- loss terms ------------------------------------------------------------------


def kl_loss(mu_d: np.ndarray, sigma_d: np.ndarray) -> float:
    """KL(N(mu, sigma^2) || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - ln sigma^2 - 1),
    averaged over the batch when given one."""
    mu = np.atleast_2d(np.asarray(mu_d, dtype=np.float64))
    sigma = np.atleast_2d(np.asarray(sigma_d, dtype=np.float64))
    if mu.shape != sigma.shape:
        raise ShapeError(f"mu shape {mu.shape} does not match sigma shape {sigma.shape}")
    if np.any(sigma <= 0.0):
        raise ValueError("kl_loss requires strictly positive sigma")
    per_sample = 0.5 * np.sum(mu ** 2 + sigma ** 2 - np.log(sigma ** 2) - 1.0, axis=1)
    return float(np.mean(per_sample))


def rec_loss(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Mean over the batch of the squared Euclidean reconstruction error."""
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    b = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeError(f"x shape {a.shape} does not match x_hat shape {b.shape}")
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


def class_loss(probs: np.ndarray, label) -> float:
    """Categorical cross-entropy -ln p[label], averaged over the batch."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape[0] != p.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {p.shape[0]}")
    if np.any(labels < 0) or np.any(labels >= p.shape[1]):
        raise IndexError(f"label out of range for {p.shape[1]} classes")
    picked = p[np.arange(p.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(picked, np.finfo(np.float64).tiny))))


# -- training-time forward/backward ------------------------------------------------

DEFAULT_WEIGHTS = {"rec": 1.0, "kl": 1.0, "align": 1.0, "c": 1.0}


def loss_and_grads(model: MlvaeModel, x: np.ndarray, eps: np.ndarray | None, *,
                   labels: np.ndarray | None = None,
                   terms: tuple[str, ...] = ("rec", "kl", "c"),
                   weights: dict[str, float] | None = None,
                   train_encoder: bool = True,
                   train_decoder: bool = True,
                   train_classifier: bool = True,
                   align_fn=None):
    """Weighted loss over the requested terms plus gradients for the
    trainable blocks.

    eps is the domain noise, one row broadcast over the batch or one row per
    sample; it is a constant in the gradient (never a trainable parameter).
    align_fn(z_c, need_grad) -> (value, dz_c or None) lets the alignment
    loss hook into the encoder path without this module knowing about
    prototype memories.
    """
    w = dict(DEFAULT_WEIGHTS)
    w.update(weights or {})
    x2, _ = _ensure_batch(x, model.arch.input_dim, "x")
    batch = x2.shape[0]
    L = model.layers

    h1 = L["enc1"].forward(x2)
    h2 = L["enc2"].forward(h1)
    mu = L["mu"].forward(h2)
    sp = L["sigma"].forward(h2)
    sigma = sp + SIGMA_FLOOR
    zc = L["zc2"].forward(L["zc1"].forward(h2))

    losses: dict[str, float] = {}
    grads: dict[str, np.ndarray] = {}
    d_mu = np.zeros_like(mu)
    d_sigma = np.zeros_like(sigma)
    d_zc = np.zeros_like(zc)

    def _collect(name: str, upstream: np.ndarray) -> np.ndarray:
        dx, dw, db = L[name].backward(upstream)
        if f"{name}.w" in grads:
            grads[f"{name}.w"] += dw
            grads[f"{name}.b"] += db
        else:
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
        return dx

    if "rec" in terms:
        if eps is None:
            raise ShapeError("reconstruction term requires domain noise eps")
        eps_arr = np.asarray(eps, dtype=np.float64)
        zd = mu + sigma * eps_arr
        z = np.concatenate([zd, zc], axis=1)
        xh = L["dec3"].forward(L["dec2"].forward(L["dec1"].forward(z)))
        losses["rec"] = rec_loss(x2, xh)
        d_xh = w["rec"] * (2.0 / batch) * (xh - x2)
        dz = _collect("dec1", _collect("dec2", _collect("dec3", d_xh)))
        if not train_decoder:
            for name in DECODER_LAYERS:
                grads.pop(f"{name}.w", None)
                grads.pop(f"{name}.b", None)
        if train_encoder:
            lat = model.arch.latent_dim
            d_zd = dz[:, :lat]
            d_zc += dz[:, lat:]
            d_mu += d_zd
            d_sigma += d_zd * eps_arr

    if "kl" in terms:
        losses["kl"] = kl_loss(mu, sigma)
        if train_encoder:
            d_mu += w["kl"] * mu / batch
            d_sigma += w["kl"] * (sigma - 1.0 / sigma) / batch

    if "c" in terms:
        if labels is None:
            raise ShapeError("classification term requires labels")
        y = np.asarray(labels, dtype=np.int64)
        g1 = L["clf1"].forward(zc)
        logits = L["clf2"].forward(g1)
        probs = softmax(logits)
        losses["c"] = class_loss(probs, y)
        onehot = np.zeros_like(probs)
        onehot[np.arange(batch), y] = 1.0
        d_logits = w["c"] * (probs - onehot) / batch
        d_zc_c = _collect("clf1", _collect("clf2", d_logits))
        if not train_classifier:
            for name in CLASSIFIER_LAYERS:
                grads.pop(f"{name}.w", None)
                grads.pop(f"{name}.b", None)
        if train_encoder:
            d_zc += d_zc_c

    if "align" in terms and align_fn is not None:
        value, d_zc_align = align_fn(zc, train_encoder)
        losses["align"] = float(value)
        if train_encoder and d_zc_align is not None:
            d_zc += w["align"] * d_zc_align

    if train_encoder:
        dh2 = _collect("mu", d_mu)
        dh2 += _collect("sigma", d_sigma)
        dh2 += _collect("zc1", _collect("zc2", d_zc))
        _collect("enc1", _collect("enc2", dh2))

    losses["total"] = float(sum(w[t] * v for t, v in losses.items() if t != "total"))
    return losses, grads
