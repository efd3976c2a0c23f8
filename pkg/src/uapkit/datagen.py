"""Deterministic synthetic multimodal dataset generator.

Images are rendered from seeded latent vectors through a fixed random
projection + sigmoid. Text embeddings for an image are noisy copies of that
image's (clean) encoder embedding, which plays the role of the latent anchor;
this simulates a trained retriever whose matching captions embed near their
image. A clean-retrieval floor check at generation time rejects pairings
where the benchmark would start from chance-level recall.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_io
from .encoder import Encoder, encode_batch, encoder_hash
from .errors import (CorruptDatasetError, DegenerateDatasetError,
                     IntegrityError, InvalidArgumentError)
from .retrieval import EmbeddingIndex, MatchAnnotation, recall_at_k
from .rng import Lcg

FLOOR_K = 10
FLOOR_MULTIPLIER = 5.0


@dataclass(frozen=True)
class DatasetParams:
    n_images: int = 200
    texts_per_image: int = 5
    image_shape: tuple[int, int, int] = (3, 32, 32)
    embed_dim: int = 64
    class_count: int = 10
    noise_level: float = 0.1
    seed: int = 7
    # retrieval-difficulty knobs: the decoder is a random rank-`decoder_rank`
    # matrix and `decoder_scale` sets the sigmoid contrast. Low rank/scale
    # keeps image variation on a small manifold that perturbations can reach.
    decoder_scale: float = 0.15
    decoder_rank: int = 8

    def __post_init__(self):
        if (self.n_images < 1 or self.texts_per_image < 1 or self.embed_dim < 1
                or self.class_count < 1 or self.noise_level < 0):
            raise InvalidArgumentError("invalid dataset parameters")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise InvalidArgumentError("image_shape must be (c, h, w)")
        if self.decoder_scale <= 0 or not 1 <= self.decoder_rank <= self.embed_dim:
            raise InvalidArgumentError(
                "decoder_scale must be positive and decoder_rank in [1, embed_dim]")
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))

    @property
    def n_texts(self) -> int:
        return self.n_images * self.texts_per_image


@dataclass
class Dataset:
    params: DatasetParams
    images: np.ndarray            # (N, c, h, w) in [0, 1]
    texts: EmbeddingIndex         # (M, d)
    annotation: MatchAnnotation
    prototypes: EmbeddingIndex    # (C, d)
    labels: list[int]             # per image
    encoder_hash: str = ""
    dataset_hash: str = ""
    manifest_path: str = ""

    def matches_of_image(self, v: int) -> frozenset[int]:
        return self.annotation.image_to_texts[v]

    def image_of_text(self, t: int) -> int:
        return self.annotation.text_to_image[t]


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def _annotation_for(params: DatasetParams) -> MatchAnnotation:
    n = params.texts_per_image
    return MatchAnnotation.from_image_lists(
        {i: list(range(i * n, (i + 1) * n)) for i in range(params.n_images)})


def build_dataset(params: DatasetParams, enc: Encoder) -> Dataset:
    """Materialize the dataset in memory (no files); enforces the floor check."""
    if tuple(enc.input_shape) != params.image_shape or enc.embed_dim != params.embed_dim:
        raise InvalidArgumentError("encoder shape does not match dataset parameters")
    c, h, w = params.image_shape
    n_pix = c * h * w
    d = params.embed_dim
    rng = Lcg(params.seed)

    latents = _unit_rows(np.array(rng.fill_gaussian(params.n_images * d)).reshape(-1, d))
    rank = params.decoder_rank
    left = np.array(rng.fill_gaussian(n_pix * rank)).reshape(n_pix, rank)
    right = np.array(rng.fill_gaussian(rank * d)).reshape(rank, d)
    decoder = left @ right / math.sqrt(rank)
    logits = latents @ decoder.T
    images = (1.0 / (1.0 + np.exp(-params.decoder_scale * logits))).reshape(
        params.n_images, c, h, w)

    anchors = encode_batch(enc, images)  # (N, d) unit rows
    noise = np.array(rng.fill_gaussian(params.n_texts * d)).reshape(-1, d)
    noise = _unit_rows(noise)  # unit direction so noise_level is the offset radius
    texts = np.repeat(anchors, params.texts_per_image, axis=0)
    texts = _unit_rows(texts + params.noise_level * noise)

    protos = _unit_rows(np.array(rng.fill_gaussian(params.class_count * d)).reshape(-1, d))
    labels = [int(i) for i in np.argmax(anchors @ protos.T, axis=1)]

    annotation = _annotation_for(params)
    ds = Dataset(params=params, images=images, texts=EmbeddingIndex(texts),
                 annotation=annotation, prototypes=EmbeddingIndex(protos),
                 labels=labels, encoder_hash=encoder_hash(enc))
    _floor_check(ds, anchors)
    return ds


def _floor_check(ds: Dataset, image_embeddings: np.ndarray) -> float:
    k = min(FLOOR_K, len(ds.texts))
    matches = [ds.matches_of_image(i) for i in range(ds.params.n_images)]
    r = recall_at_k(EmbeddingIndex(image_embeddings), ds.texts, matches, k)
    threshold = FLOOR_MULTIPLIER * k / len(ds.texts)
    if r < threshold:
        raise DegenerateDatasetError(
            f"clean TR R@{k} = {r:.4f} below floor {threshold:.4f}; "
            "the decoder/encoder seed pairing yields chance-level retrieval")
    return r


def generate(params: DatasetParams, enc: Encoder, out_dir) -> Path:
    """Generate the dataset and write all files; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(params, enc)

    files = {
        "images": "images.uapt",
        "texts": "texts.uapt",
        "prototypes": "prototypes.uapt",
    }
    tensor_io.write_tensor(out_dir / files["images"], ds.images)
    tensor_io.write_tensor(out_dir / files["texts"], ds.texts.embeddings)
    tensor_io.write_tensor(out_dir / files["prototypes"], ds.prototypes.embeddings)

    annotations = {str(v): sorted(ts) for v, ts in ds.annotation.image_to_texts.items()}
    (out_dir / "annotations.json").write_text(json.dumps(annotations, sort_keys=True))
    (out_dir / "labels.json").write_text(json.dumps(ds.labels))
    files["annotations"] = "annotations.json"
    files["labels"] = "labels.json"

    manifest = {
        "params": {
            "n_images": params.n_images,
            "texts_per_image": params.texts_per_image,
            "image_shape": list(params.image_shape),
            "embed_dim": params.embed_dim,
            "class_count": params.class_count,
            "noise_level": params.noise_level,
            "seed": params.seed,
            "decoder_scale": params.decoder_scale,
            "decoder_rank": params.decoder_rank,
        },
        "files": files,
        "sha256": {name: tensor_io.sha256_file(out_dir / fname)
                   for name, fname in files.items()},
        "encoder_hash": ds.encoder_hash,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def dataset_hash(manifest_path) -> str:
    return tensor_io.sha256_file(manifest_path)


def load(manifest_path) -> Dataset:
    """Load and validate a generated dataset from its manifest."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    for name, fname in manifest["files"].items():
        path = root / fname
        if not path.exists():
            raise IntegrityError(f"missing dataset file {path}")
        if tensor_io.sha256_file(path) != manifest["sha256"][name]:
            raise IntegrityError(f"{path}: hash mismatch")

    p = manifest["params"]
    params = DatasetParams(
        n_images=p["n_images"], texts_per_image=p["texts_per_image"],
        image_shape=tuple(p["image_shape"]), embed_dim=p["embed_dim"],
        class_count=p["class_count"], noise_level=p["noise_level"], seed=p["seed"],
        decoder_scale=p["decoder_scale"], decoder_rank=p["decoder_rank"])

    images = tensor_io.read_tensor(root / manifest["files"]["images"])
    texts = tensor_io.read_tensor(root / manifest["files"]["texts"])
    protos = tensor_io.read_tensor(root / manifest["files"]["prototypes"])
    raw_annotations = json.loads((root / manifest["files"]["annotations"]).read_text())
    labels = json.loads((root / manifest["files"]["labels"]).read_text())

    if images.shape != (params.n_images, *params.image_shape):
        raise CorruptDatasetError("image tensor shape does not match manifest")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise CorruptDatasetError("image values outside [0, 1]")
    if texts.shape != (params.n_texts, params.embed_dim):
        raise CorruptDatasetError("text tensor shape does not match manifest")
    if protos.shape != (params.class_count, params.embed_dim):
        raise CorruptDatasetError("prototype tensor shape does not match manifest")
    if len(labels) != params.n_images or any(
            not 0 <= int(y) < params.class_count for y in labels):
        raise CorruptDatasetError("bad label list")

    try:
        annotation = MatchAnnotation.from_image_lists(
            {int(v): [int(t) for t in ts] for v, ts in raw_annotations.items()})
        texts_index = EmbeddingIndex(texts)
        protos_index = EmbeddingIndex(protos)
    except InvalidArgumentError as exc:
        raise CorruptDatasetError(str(exc)) from exc
    if sum(len(ts) for ts in annotation.image_to_texts.values()) != params.n_texts:
        raise CorruptDatasetError("annotation does not cover every text exactly once")

    return Dataset(params=params, images=images, texts=texts_index,
                   annotation=annotation, prototypes=protos_index,
                   labels=[int(y) for y in labels],
                   encoder_hash=manifest.get("encoder_hash", ""),
                   dataset_hash=dataset_hash(manifest_path),
                   manifest_path=str(manifest_path))
