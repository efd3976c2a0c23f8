"""Differentiable image encoders with unit-norm embeddings.

Two kinds: a single linear map and a small fully-connected net (tanh or
relu), both followed by l2 normalization. Gradients are hand-derived; the
finite-difference checker keeps them honest. Weights come from the portable
LCG so any run of the same seed reproduces them exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_io
from .core import as_tensor
from .errors import DegenerateEncodingError, IntegrityError, InvalidArgumentError
from .rng import Lcg

KINDS = ("linear", "mlp")
ACTIVATIONS = ("tanh", "relu")
_ZERO_NORM = 1e-12


@dataclass(frozen=True)
class Encoder:
    kind: str
    input_shape: tuple[int, int, int]
    embed_dim: int
    layer_widths: tuple[int, ...]
    activation: str
    weights: tuple[np.ndarray, ...]  # per layer, shape (out, in)
    biases: tuple[np.ndarray, ...]
    seed: int

    @property
    def n_inputs(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    def manifest_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "embed_dim": self.embed_dim,
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "seed": self.seed,
        }


def build_encoder(kind: str, input_shape, embed_dim: int, layer_widths=(),
                  activation: str = "tanh", seed: int = 0) -> Encoder:
    """Construct an encoder with seeded uniform(-a, a), a = sqrt(6/(fan_in+fan_out))."""
    if kind not in KINDS:
        raise InvalidArgumentError(f"unknown encoder kind {kind!r}")
    if activation not in ACTIVATIONS:
        raise InvalidArgumentError(f"unknown activation {activation!r}")
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 3 or min(input_shape) < 1 or embed_dim < 1:
        raise InvalidArgumentError("bad input_shape or embed_dim")
    layer_widths = tuple(int(v) for v in layer_widths)
    if kind == "linear" and layer_widths:
        raise InvalidArgumentError("linear encoder takes no layer_widths")
    c, h, w = input_shape
    dims = [c * h * w, *layer_widths, embed_dim]
    rng = Lcg(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        flat = np.array(rng.fill_uniform(fan_out * fan_in, -a, a))
        weights.append(flat.reshape(fan_out, fan_in))
        biases.append(np.zeros(fan_out))
    return Encoder(kind, input_shape, embed_dim, layer_widths, activation,
                   tuple(weights), tuple(biases), seed)


def default_toy_encoder() -> Encoder:
    """The benchmark encoder: mlp 3x32x32 -> [256, 128] -> 64, tanh, seed 42."""
    return build_encoder("mlp", (3, 32, 32), 64, (256, 128), "tanh", 42)


def _activate(name: str, s: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(s)
    return np.maximum(s, 0.0)  # relu; subgradient at 0 taken as 0 in backward


def _activate_grad(name: str, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    return (s > 0.0).astype(np.float64)


def _forward_flat(enc: Encoder, x: np.ndarray):
    """Run the stack on flattened input(s); returns pre-norm output and caches."""
    caches = []
    a = x
    last = len(enc.weights) - 1
    for i, (W, b) in enumerate(zip(enc.weights, enc.biases)):
        s = a @ W.T + b
        if i < last:
            out = _activate(enc.activation, s)
        else:
            out = s
        caches.append((a, s, out))
        a = out
    return a, caches


def encode_batch(enc: Encoder, images: np.ndarray) -> np.ndarray:
    """Encode (B, c, h, w) images to (B, embed_dim) unit-norm rows."""
    images = as_tensor(images)
    if images.shape[1:] != enc.input_shape:
        raise InvalidArgumentError(
            f"expected images of shape (B,)+{enc.input_shape}, got {images.shape}")
    x = images.reshape(images.shape[0], -1)
    z, _ = _forward_flat(enc, x)
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < _ZERO_NORM):
        raise DegenerateEncodingError("pre-normalization output is zero")
    return z / norms[:, None]


def encode(enc: Encoder, image: np.ndarray) -> np.ndarray:
    """Encode a single (c, h, w) image to a unit-norm embedding."""
    image = as_tensor(image, shape=enc.input_shape)
    return encode_batch(enc, image[None])[0]


@dataclass(frozen=True)
class ScoreGradient:
    value: float
    gradient: np.ndarray  # (c, h, w)


@dataclass
class ForwardCache:
    """Batched forward state kept around for a later backward pass."""
    embeddings: np.ndarray          # (B, d) unit rows
    norms: np.ndarray               # (B,) pre-normalization norms
    layers: list                    # per layer (a_in, s, a_out)


def forward_with_cache(enc: Encoder, images: np.ndarray) -> ForwardCache:
    """Encode a (B, c, h, w) batch and keep activations for backward passes."""
    images = as_tensor(images)
    if images.shape[1:] != enc.input_shape:
        raise InvalidArgumentError(
            f"expected images of shape (B,)+{enc.input_shape}, got {images.shape}")
    x = images.reshape(images.shape[0], -1)
    z, caches = _forward_flat(enc, x)
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < _ZERO_NORM):
        raise DegenerateEncodingError("pre-normalization output is zero")
    return ForwardCache(embeddings=z / norms[:, None], norms=norms, layers=caches)


def backward_from_cache(enc: Encoder, cache: ForwardCache, us: np.ndarray,
                        rows=None) -> np.ndarray:
    """Input-gradients of u_b . normalize(pre_norm(image_b)) per batch row.

    us is (B', d); rows selects which cached batch rows to differentiate
    (default: all, in which case B' must equal the cached batch size).
    """
    if rows is None:
        e, norms = cache.embeddings, cache.norms
        layers = cache.layers
    else:
        rows = list(rows)
        e, norms = cache.embeddings[rows], cache.norms[rows]
        layers = [(a[rows], s[rows], out[rows]) for a, s, out in cache.layers]
    values = np.sum(us * e, axis=1)
    # normalization Jacobian: d(u.e)/dz = (u - (u.e) e) / ||z||
    g = (us - values[:, None] * e) / norms[:, None]
    last = len(enc.weights) - 1
    for i in range(last, -1, -1):
        _, s, a_out = layers[i]
        if i < last:  # hidden layer: undo the activation
            g = g * _activate_grad(enc.activation, s, a_out)
        g = g @ enc.weights[i]
    return g.reshape((g.shape[0],) + enc.input_shape)


def input_gradient(enc: Encoder, image: np.ndarray, u: np.ndarray) -> ScoreGradient:
    """Value and input-gradient of u . normalize(pre_norm(image)).

    u need not be unit-norm; callers use it for single text embeddings and
    for embedding-space difference vectors alike.
    """
    image = as_tensor(image, shape=enc.input_shape)
    cache = forward_with_cache(enc, image[None])
    value = float(u @ cache.embeddings[0])
    grad = backward_from_cache(enc, cache, np.asarray(u)[None])[0]
    return ScoreGradient(value=value, gradient=grad)


def score_with_gradient(enc: Encoder, image: np.ndarray,
                        text_embedding: np.ndarray) -> ScoreGradient:
    """Cosine score f(v) = t . E(v) and its exact gradient w.r.t. the pixels."""
    t = as_tensor(text_embedding, shape=(enc.embed_dim,))
    if abs(np.linalg.norm(t) - 1.0) > 1e-6:
        raise InvalidArgumentError("text embedding must be unit-norm")
    return input_gradient(enc, image, t)


def gradcheck(enc: Encoder, image: np.ndarray, text_embedding: np.ndarray,
              n_probes: int = 50, step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if step <= 0:
        raise InvalidArgumentError("step must be positive")
    sg = score_with_gradient(enc, image, text_embedding)
    flat_grad = sg.gradient.ravel()
    rng = np.random.default_rng(seed)
    coords = rng.integers(0, flat_grad.size, size=n_probes)
    worst = 0.0
    base = image.ravel().copy()
    for idx in coords:
        bumped = base.copy()
        bumped[idx] += step
        hi = float(text_embedding @ encode(enc, bumped.reshape(enc.input_shape)))
        bumped[idx] = base[idx] - step
        lo = float(text_embedding @ encode(enc, bumped.reshape(enc.input_shape)))
        fd = (hi - lo) / (2.0 * step)
        analytic = float(flat_grad[idx])
        err = abs(analytic - fd) / max(abs(analytic), 1e-12)
        worst = max(worst, err)
    return worst


# -- serialization ----------------------------------------------------------

def save_encoder(enc: Encoder, manifest_path) -> str:
    """Write manifest JSON plus per-layer UAPT weight files; returns the hash."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, (W, b) in enumerate(zip(enc.weights, enc.biases)):
        w_name, b_name = f"w{i}.uapt", f"b{i}.uapt"
        tensor_io.write_tensor(manifest_path.parent / w_name, W)
        tensor_io.write_tensor(manifest_path.parent / b_name, b)
        layers.append({
            "weight": w_name,
            "bias": b_name,
            "weight_sha256": tensor_io.sha256_file(manifest_path.parent / w_name),
            "bias_sha256": tensor_io.sha256_file(manifest_path.parent / b_name),
        })
    manifest = enc.manifest_dict() | {"layers": layers}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return encoder_hash(enc)


def load_encoder(manifest_path) -> Encoder:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    weights, biases = [], []
    for layer in manifest["layers"]:
        w_path = manifest_path.parent / layer["weight"]
        b_path = manifest_path.parent / layer["bias"]
        if tensor_io.sha256_file(w_path) != layer["weight_sha256"]:
            raise IntegrityError(f"{w_path}: hash mismatch")
        if tensor_io.sha256_file(b_path) != layer["bias_sha256"]:
            raise IntegrityError(f"{b_path}: hash mismatch")
        weights.append(tensor_io.read_tensor(w_path))
        biases.append(tensor_io.read_tensor(b_path))
    return Encoder(
        kind=manifest["kind"],
        input_shape=tuple(manifest["input_shape"]),
        embed_dim=manifest["embed_dim"],
        layer_widths=tuple(manifest["layer_widths"]),
        activation=manifest["activation"],
        weights=tuple(weights),
        biases=tuple(biases),
        seed=manifest["seed"],
    )


def encoder_hash(enc: Encoder) -> str:
    """Content hash over the architecture parameters and raw weight bytes."""
    h = hashlib.sha256()
    h.update(json.dumps(enc.manifest_dict(), sort_keys=True).encode())
    for W, b in zip(enc.weights, enc.biases):
        h.update(np.ascontiguousarray(W, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return h.hexdigest()
