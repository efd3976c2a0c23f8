"""Dense float64 tensor helpers: norms, projections, clamping, patch application.

All functions are pure and operate on C-contiguous float64 numpy arrays.
There is deliberately no broadcasting: every shape mismatch raises.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgumentError


def as_tensor(values, shape=None) -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 array; optionally enforce a shape."""
    t = np.ascontiguousarray(values, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise InvalidArgumentError("tensor contains NaN or Inf")
    if shape is not None and t.shape != tuple(shape):
        raise InvalidArgumentError(f"expected shape {tuple(shape)}, got {t.shape}")
    return t


def require_same_shape(*tensors: np.ndarray) -> None:
    shapes = {t.shape for t in tensors}
    if len(shapes) > 1:
        raise InvalidArgumentError(f"shape mismatch: {sorted(shapes)}")


def l2_norm(t: np.ndarray) -> float:
    """Euclidean norm of the flattened tensor."""
    if t.size == 0:
        raise InvalidArgumentError("l2_norm of an empty tensor")
    return float(np.linalg.norm(t.ravel()))


def project_l2(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto the l2 ball of radius epsilon; identity inside the ball."""
    if epsilon <= 0:
        raise InvalidArgumentError("epsilon must be positive")
    norm = l2_norm(delta) if delta.size else 0.0
    # the relative slack makes the projection an exact fixed point: rescaling
    # can leave the recomputed norm a few ulps above epsilon
    if norm > epsilon * (1.0 + 1e-12):
        return delta * (epsilon / norm)
    return delta.copy()


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Elementwise clamp to [-epsilon, epsilon]."""
    if epsilon <= 0:
        raise InvalidArgumentError("epsilon must be positive")
    return np.clip(delta, -epsilon, epsilon)


def clamp_unit(t: np.ndarray) -> np.ndarray:
    """Elementwise clamp to the valid pixel range [0, 1]."""
    return np.clip(t, 0.0, 1.0)


def validate_pixel_image(image: np.ndarray) -> np.ndarray:
    """Check a (c, h, w) image with all values in [0, 1]."""
    if image.ndim != 3:
        raise InvalidArgumentError(f"image must be rank 3 (c,h,w), got rank {image.ndim}")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise InvalidArgumentError("image values outside [0, 1]")
    return image


def validate_mask(mask: np.ndarray) -> np.ndarray:
    """Check a binary (c, h, w) mask that is identical across channels."""
    if mask.ndim != 3:
        raise InvalidArgumentError(f"mask must be rank 3 (c,h,w), got rank {mask.ndim}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise InvalidArgumentError("mask must be exactly binary")
    if mask.shape[0] > 1 and not np.all(mask == mask[0:1]):
        raise InvalidArgumentError("mask must be identical across channels")
    return mask


def apply_patch(image: np.ndarray, delta: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace the masked region of image with delta; off-mask pixels bit-identical."""
    validate_pixel_image(image)
    validate_mask(mask)
    require_same_shape(image, delta, mask)
    on = mask == 1.0
    patch_vals = delta[on]
    if patch_vals.size and (patch_vals.min() < 0.0 or patch_vals.max() > 1.0):
        raise InvalidArgumentError("delta values under the mask must lie in [0, 1]")
    return np.where(on, delta, image)


def square_patch_mask(image_shape: tuple[int, int, int], side: int,
                      offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Square patch mask anchored at the bottom-right corner.

    offset = (dy, dx) shifts the patch's bottom-right corner away from the
    image's bottom-right corner (nonnegative values move up/left).
    """
    c, h, w = image_shape
    dy, dx = offset
    if side <= 0 or side + dy > h or side + dx > w or dy < 0 or dx < 0:
        raise InvalidArgumentError("patch does not fit inside the image")
    mask = np.zeros((c, h, w), dtype=np.float64)
    y1, x1 = h - dy, w - dx
    mask[:, y1 - side:y1, x1 - side:x1] = 1.0
    return mask


def patch_side_for_area(image_shape: tuple[int, int, int], area_fraction: float = 0.03) -> int:
    """Side length of a square covering area_fraction of the h*w plane."""
    _, h, w = image_shape
    side = int(math.floor(math.sqrt(area_fraction * h * w)))
    if side < 1:
        raise InvalidArgumentError("image too small for the requested patch area")
    return side
