"""Universal perturbation synthesis against a differentiable encoder.

Strategies:
  - tra:  image loop; pushes each (patched) image embedding across boundaries
          built from its matching vs. nearest non-matching texts.
  - ira:  text loop; warps the patched candidate images of each text so the
          matched image drops out of the text's top-k.
  - tira: alternates both over image batches, sharing one inner direction r
          per batch half and committing delta once per half.

Patch mode replaces pixels under a binary mask and keeps delta clamped to
[0, 1]; global mode adds delta to whole images and projects onto an l2/linf
ball after every commit. All loops are sequential and fully deterministic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .core import (apply_patch, clamp_unit, project_l2, project_linf,
                   validate_mask)
from .datagen import Dataset
from .encoder import (Encoder, backward_from_cache, encode_batch,
                      forward_with_cache)
from .errors import InvalidArgumentError
from .retrieval import (EmbeddingIndex, indicator, recall_at_k,
                        select_nonmatching_topk, topk_class_accuracy)
from .rng import Lcg

DEGENERATE_DENOM = 1e-12
EPS_L2_DEFAULT = 2000.0 / 255.0
EPS_LINF_DEFAULT = 10.0 / 255.0
PATCH_AREA_DEFAULT = 0.03


@dataclass(frozen=True)
class AttackConfig:
    k: int = 10
    eta: float = 0.02
    epochs: int = 10
    max_inner_iters: int = 50
    batch_size: int = 16
    mode: str = "patch"              # "patch" | "global"
    mask: np.ndarray | None = None   # required in patch mode
    norm: str | None = None          # "l2" | "linf", global mode
    epsilon: float | None = None     # global mode budget
    seed: int = 0
    shuffle: bool = False

    def __post_init__(self):
        if self.k < 1 or self.epochs < 0 or self.max_inner_iters < 1 or self.batch_size < 1:
            raise InvalidArgumentError("k, max_inner_iters, batch_size must be positive")
        if self.eta <= 0:
            raise InvalidArgumentError("eta must be positive")
        if self.mode == "patch":
            if self.mask is None:
                raise InvalidArgumentError("patch mode requires a mask")
            if self.norm is not None or self.epsilon is not None:
                raise InvalidArgumentError("norm/epsilon are global-mode options")
            validate_mask(self.mask)
        elif self.mode == "global":
            if self.mask is not None:
                raise InvalidArgumentError("mask is a patch-mode option")
            if self.norm not in ("l2", "linf"):
                raise InvalidArgumentError("global mode requires norm in {l2, linf}")
            if self.epsilon is None or self.epsilon <= 0:
                raise InvalidArgumentError("global mode requires epsilon > 0")
        else:
            raise InvalidArgumentError(f"unknown mode {self.mode!r}")

    def to_json_dict(self) -> dict:
        d = {
            "k": self.k, "eta": self.eta, "epochs": self.epochs,
            "max_inner_iters": self.max_inner_iters, "batch_size": self.batch_size,
            "mode": self.mode, "seed": self.seed, "shuffle": self.shuffle,
        }
        if self.mode == "global":
            d["norm"] = self.norm
            d["epsilon"] = self.epsilon
        return d


@dataclass
class SampleRecord:
    kind: str          # "image" (text-retrieval loop) or "text" (image-retrieval loop)
    sample_id: int
    epoch: int
    inner_iterations: int
    converged: bool


@dataclass
class CommitRecord:
    epoch: int
    norm_l2: float
    norm_linf: float


@dataclass
class AttackTrace:
    records: list[SampleRecord] = field(default_factory=list)
    commits: list[CommitRecord] = field(default_factory=list)
    epoch_metrics: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        n = len(self.records)
        conv = sum(r.converged for r in self.records)
        return {
            "samples_visited": n,
            "converged": conv,
            "convergence_rate": conv / n if n else 1.0,
            "total_inner_iterations": sum(r.inner_iterations for r in self.records),
            "epochs": len(self.epoch_metrics),
        }


@dataclass
class Perturbation:
    delta: np.ndarray
    mode: str
    mask: np.ndarray | None = None
    norm: str | None = None
    epsilon: float | None = None
    provenance: dict = field(default_factory=dict)

    def apply(self, image: np.ndarray) -> np.ndarray:
        if self.mode == "patch":
            return apply_patch(image, self.delta, self.mask)
        return clamp_unit(image + self.delta)

    def apply_batch(self, images: np.ndarray) -> np.ndarray:
        if self.mode == "patch":
            on = self.mask == 1.0
            return np.where(on[None], self.delta[None], images)
        return clamp_unit(images + self.delta[None])


# -- inner loops -------------------------------------------------------------


def _boundary_step(grad_target: np.ndarray, grad_true: np.ndarray, gap: float):
    """One crossing step toward the boundary f_true = f_target.

    gap = f_true - f_target (positive while uncrossed). Returns None when the
    gradient difference is numerically degenerate.
    """
    diff = grad_target - grad_true
    sq = float(np.vdot(diff, diff))
    if sq < DEGENERATE_DENOM ** 2:
        return None
    return (gap / sq) * diff


def _tra_inner(enc: Encoder, ds: Dataset, v_idx: int, delta: np.ndarray,
               r: np.ndarray, cfg: AttackConfig):
    """Image-loop inner body for one image; returns (r, iterations, converged).

    r accumulates on top of its incoming value (shared across a combined-run
    batch).
    """
    mask = cfg.mask if cfg.mode == "patch" else None
    clean = ds.images[v_idx]
    match_set = ds.matches_of_image(v_idx)
    y_list = sorted(match_set)

    if cfg.mode == "patch":
        v = apply_patch(clean, delta, mask)
    else:
        v = clean + delta

    # candidate non-matching texts are the nearest to the image as it looks
    # under the current perturbation, so the stopping test tracks the metric
    entry_emb = encode_batch(enc, v[None])[0]
    y_prime = select_nonmatching_topk(entry_emb, ds.texts, match_set, cfg.k)

    def masked(g):
        return g * mask if mask is not None else g

    def fooled(r_vec):
        probe = v + (1.0 + cfg.eta) * masked(r_vec)
        emb = encode_batch(enc, probe[None])[0]
        return indicator(emb, ds.texts, match_set, cfg.k) == 0

    iterations = 0
    while not fooled(r) and iterations < cfg.max_inner_iters:
        v_hat = v + masked(r)
        cache = forward_with_cache(enc, v_hat[None])
        sims = ds.texts.embeddings @ cache.embeddings[0]
        y_max = max(y_list, key=lambda y: (sims[y], -y))
        yp_min = min(y_prime, key=lambda y: (sims[y], y))
        t_diff = ds.texts.embeddings[yp_min] - ds.texts.embeddings[y_max]
        # single backward pass for the difference score (f_{y'} - f_y)
        diff_grad = masked(backward_from_cache(enc, cache, t_diff[None])[0])
        sq = float(np.vdot(diff_grad, diff_grad))
        if sq < DEGENERATE_DENOM ** 2:
            return r, iterations, False
        gap = float(sims[y_max] - sims[yp_min])
        r = r + (gap / sq) * diff_grad
        iterations += 1
    return r, iterations, fooled(r)


def _ira_inner(enc: Encoder, ds: Dataset, t_idx: int, delta: np.ndarray,
               r: np.ndarray, cfg: AttackConfig, gallery_embs: np.ndarray):
    """Text-loop inner body for one text; returns (r, iterations, converged).

    gallery_embs holds the embeddings of every image under the current
    perturbation; ranking candidates against it means the stopping test
    (match outranked by k candidates) certifies a full-gallery retrieval miss.
    """
    mask = cfg.mask if cfg.mode == "patch" else None
    t_emb = ds.texts.embeddings[t_idx]
    y = ds.image_of_text(t_idx)
    y_prime = select_nonmatching_topk(t_emb, EmbeddingIndex(gallery_embs), {y}, cfg.k)
    candidates = [y, *y_prime]  # matched image first

    if cfg.mode == "patch":
        on = mask == 1.0
        base = np.where(on[None], delta[None], ds.images[candidates])
    else:
        base = ds.images[candidates] + delta[None]

    def masked(g):
        return g * mask if mask is not None else g

    def fooled(r_vec):
        probe = base + (1.0 + cfg.eta) * masked(r_vec)[None]
        embs = encode_batch(enc, probe)
        return indicator(t_emb, EmbeddingIndex(embs), {0}, cfg.k) == 0

    iterations = 0
    while not fooled(r) and iterations < cfg.max_inner_iters:
        v_hat = base + masked(r)[None]
        cache = forward_with_cache(enc, v_hat)
        sims = cache.embeddings @ t_emb
        # weakest non-matching candidate; ties toward the smallest image index
        pos = min(range(1, len(candidates)),
                  key=lambda p: (sims[p], candidates[p]))
        grads = backward_from_cache(enc, cache, np.stack([t_emb, t_emb]),
                                    rows=[pos, 0])
        step = _boundary_step(masked(grads[0]), masked(grads[1]),
                              float(sims[0] - sims[pos]))
        if step is None:
            return r, iterations, False
        r = r + step
        iterations += 1
    return r, iterations, fooled(r)


# -- commit and drivers ------------------------------------------------------


def _commit(delta: np.ndarray, r: np.ndarray, cfg: AttackConfig,
            trace: AttackTrace, epoch: int) -> np.ndarray:
    if cfg.mode == "patch":
        step = r * cfg.mask
        new = clamp_unit(delta + (1.0 + cfg.eta) * step)
    elif cfg.norm == "l2":
        new = project_l2(delta + (1.0 + cfg.eta) * r, cfg.epsilon)
    else:
        new = project_linf(delta + (1.0 + cfg.eta) * r, cfg.epsilon)
    trace.commits.append(CommitRecord(
        epoch=epoch,
        norm_l2=float(np.linalg.norm(new)),
        norm_linf=float(np.abs(new).max()) if new.size else 0.0,
    ))
    return new


def _order(n: int, cfg: AttackConfig, epoch: int) -> list[int]:
    idx = list(range(n))
    if cfg.shuffle:
        rng = Lcg((cfg.seed << 1) ^ epoch)
        for i in range(n - 1, 0, -1):  # Fisher-Yates on the LCG stream
            j = rng.next_u64() % (i + 1)
            idx[i], idx[j] = idx[j], idx[i]
    return idx


def evaluate_metrics(enc: Encoder, ds: Dataset, perturbation: Perturbation | None,
                     k_list=(1, 5, 10), image_subset=None) -> dict:
    """TR/IR R@k and Top-1/Top-5 metrics, optionally over an image subset."""
    if image_subset is None:
        image_subset = list(range(ds.params.n_images))
    images = ds.images[image_subset]
    if perturbation is not None:
        images = perturbation.apply_batch(images)
    embs = encode_batch(enc, images)
    img_index = EmbeddingIndex(embs)

    text_ids = sorted(t for v in image_subset for t in ds.matches_of_image(v))
    text_pos = {t: i for i, t in enumerate(text_ids)}
    img_pos = {v: i for i, v in enumerate(image_subset)}
    texts = EmbeddingIndex(ds.texts.embeddings[text_ids])

    tr_matches = [{text_pos[t] for t in ds.matches_of_image(v)} for v in image_subset]
    ir_matches = [{img_pos[ds.image_of_text(t)]} for t in text_ids]

    out = {}
    for k in k_list:
        out[f"tr_r{k}"] = recall_at_k(img_index, texts, tr_matches, k)
        out[f"ir_r{k}"] = recall_at_k(texts, img_index, ir_matches, k)
    labels = [ds.labels[v] for v in image_subset]
    n_protos = len(ds.prototypes)
    out["top1"] = topk_class_accuracy(img_index, ds.prototypes, labels, 1)
    out["top5"] = topk_class_accuracy(img_index, ds.prototypes, labels, min(5, n_protos))
    return out


def _perturbed_gallery(enc: Encoder, ds: Dataset, delta: np.ndarray,
                       cfg: AttackConfig) -> np.ndarray:
    """Embeddings of every image under the current delta (inner-loop view)."""
    if cfg.mode == "patch":
        on = cfg.mask == 1.0
        images = np.where(on[None], delta[None], ds.images)
    else:
        images = ds.images + delta[None]
    return encode_batch(enc, images)


def _probe_subset(ds: Dataset, limit: int = 32) -> list[int]:
    n = ds.params.n_images
    stride = max(1, n // limit)
    return list(range(0, n, stride))[:limit]


def _make_perturbation(delta: np.ndarray, cfg: AttackConfig,
                       provenance: dict) -> Perturbation:
    return Perturbation(delta=delta, mode=cfg.mode, mask=cfg.mask,
                        norm=cfg.norm, epsilon=cfg.epsilon, provenance=provenance)


def _provenance(enc_hash: str, ds_hash: str, cfg: AttackConfig, strategy: str) -> dict:
    cfg_json = json.dumps(cfg.to_json_dict(), sort_keys=True)
    return {
        "strategy": strategy,
        "config": cfg.to_json_dict(),
        "config_hash": hashlib.sha256(cfg_json.encode()).hexdigest(),
        "encoder_hash": enc_hash,
        "dataset_hash": ds_hash,
    }


def _epoch_metrics(enc, ds, delta, cfg, epoch, trace):
    probe = _probe_subset(ds)
    pert = _make_perturbation(delta, cfg, {})
    clean = evaluate_metrics(enc, ds, None, (10,), probe)
    adv = evaluate_metrics(enc, ds, pert, (10,), probe)
    trace.epoch_metrics.append({
        "epoch": epoch,
        "clean_tr_r10": clean["tr_r10"], "adv_tr_r10": adv["tr_r10"],
        "clean_ir_r10": clean["ir_r10"], "adv_ir_r10": adv["ir_r10"],
    })


def _run_single(enc: Encoder, ds: Dataset, cfg: AttackConfig, strategy: str,
                enc_hash: str = "", ds_hash: str = ""):
    """Driver for plain tra / ira over all images / texts."""
    if ds.params.n_images == 0:
        raise InvalidArgumentError("empty dataset")
    delta = np.zeros(ds.params.image_shape)
    trace = AttackTrace()
    n = ds.params.n_images if strategy == "tra" else ds.params.n_texts
    kind = "image" if strategy == "tra" else "text"
    for epoch in range(cfg.epochs):
        for sid in _order(n, cfg, epoch):
            r = np.zeros_like(delta)
            if strategy == "tra":
                r, iters, ok = _tra_inner(enc, ds, sid, delta, r, cfg)
            else:
                gallery = _perturbed_gallery(enc, ds, delta, cfg)
                r, iters, ok = _ira_inner(enc, ds, sid, delta, r, cfg, gallery)
            delta = _commit(delta, r, cfg, trace, epoch)
            trace.records.append(SampleRecord(kind, sid, epoch, iters, ok))
        _epoch_metrics(enc, ds, delta, cfg, epoch, trace)
    pert = _make_perturbation(delta, cfg, _provenance(enc_hash, ds_hash, cfg, strategy))
    return pert, trace


def run_tra(enc: Encoder, ds: Dataset, cfg: AttackConfig, **prov):
    """Image-loop attack (degrades image-to-text retrieval)."""
    return _run_single(enc, ds, cfg, "tra", **prov)


def run_ira(enc: Encoder, ds: Dataset, cfg: AttackConfig, **prov):
    """Text-loop attack (degrades text-to-image retrieval)."""
    return _run_single(enc, ds, cfg, "ira", **prov)


def run_tira(enc: Encoder, ds: Dataset, cfg: AttackConfig,
             enc_hash: str = "", ds_hash: str = ""):
    """Alternating attack over image batches.

    Per batch: the image loop accumulates one shared r and commits once,
    then the batch's matching texts do the same with the text-loop bodies.
    """
    if ds.params.n_images == 0:
        raise InvalidArgumentError("empty dataset")
    delta = np.zeros(ds.params.image_shape)
    trace = AttackTrace()
    n = ds.params.n_images
    for epoch in range(cfg.epochs):
        order = _order(n, cfg, epoch)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            texts = sorted(t for v in batch for t in ds.matches_of_image(v))

            r = np.zeros_like(delta)
            for v in batch:
                r, iters, ok = _tra_inner(enc, ds, v, delta, r, cfg)
                trace.records.append(SampleRecord("image", v, epoch, iters, ok))
            delta = _commit(delta, r, cfg, trace, epoch)

            # delta is fixed for the whole text half, so one gallery suffices
            gallery = _perturbed_gallery(enc, ds, delta, cfg)
            r = np.zeros_like(delta)
            for t in texts:
                r, iters, ok = _ira_inner(enc, ds, t, delta, r, cfg, gallery)
                trace.records.append(SampleRecord("text", t, epoch, iters, ok))
            delta = _commit(delta, r, cfg, trace, epoch)
        _epoch_metrics(enc, ds, delta, cfg, epoch, trace)
    pert = _make_perturbation(delta, cfg, _provenance(enc_hash, ds_hash, cfg, "tira"))
    return pert, trace


def run_global(enc: Encoder, ds: Dataset, cfg: AttackConfig, strategy: str,
               enc_hash: str = "", ds_hash: str = ""):
    """Global (norm-bounded, whole-image) variant of tra or ira."""
    if cfg.mode != "global":
        raise InvalidArgumentError("run_global requires a global-mode config")
    if strategy not in ("tra", "ira"):
        raise InvalidArgumentError(f"unknown strategy {strategy!r}")
    return _run_single(enc, ds, cfg, strategy,
                       enc_hash=enc_hash, ds_hash=ds_hash)


def run_attack(enc: Encoder, ds: Dataset, cfg: AttackConfig, strategy: str,
               enc_hash: str = "", ds_hash: str = ""):
    """Dispatch on (strategy, mode)."""
    if strategy == "tira":
        if cfg.mode != "patch":
            raise InvalidArgumentError("tira is defined for patch mode")
        return run_tira(enc, ds, cfg, enc_hash=enc_hash, ds_hash=ds_hash)
    if cfg.mode == "global":
        return run_global(enc, ds, cfg, strategy, enc_hash=enc_hash, ds_hash=ds_hash)
    if strategy == "tra":
        return run_tra(enc, ds, cfg, enc_hash=enc_hash, ds_hash=ds_hash)
    if strategy == "ira":
        return run_ira(enc, ds, cfg, enc_hash=enc_hash, ds_hash=ds_hash)
    raise InvalidArgumentError(f"unknown strategy {strategy!r}")
