"""Training objectives and evaluation metrics.

All losses take and return :class:`~ssrseg.tensor.Tensor` objects so they can
be differentiated.  When a leading batch axis is present the per-sample
losses are averaged.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import (
    Tensor,
    adaptive_avg_pool,
    concat,
    matmul,
    reduce_mean,
    reduce_sum,
    reshape,
    resize_linear,
    sigmoid,
    transpose,
)

TERMS = ("lmsr", "lisr", "fa", "sa")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined objective and of the region-weighted MSE."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    lambda1: float = 0.8
    lambda2: float = 0.2
    xi: float = 1e-5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lambda1", "lambda2", "xi"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {value}")
        if self.xi <= 0:
            raise ConfigError(f"xi must be > 0, got {self.xi}")


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ContractError(f"{op}: shapes differ, {a.shape} vs {b.shape}")


def _same_sample_shape(a: Tensor, b: Tensor, op: str):
    # batch axes may broadcast (1 vs N)
    if a.shape[1:] != b.shape[1:] or (a.shape[0] != b.shape[0] and 1 not in (a.shape[0], b.shape[0])):
        raise ContractError(f"{op}: shapes differ, {a.shape} vs {b.shape}")


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == like.dtype else Tensor(x.data.astype(like.dtype))
    return Tensor(np.asarray(x, dtype=like.dtype))


def _dice_per_sample(pred: Tensor, target: Tensor, xi: float) -> Tensor:
    axes = tuple(range(1, pred.ndim))
    inter = reduce_sum(pred * target, axes)
    denom = reduce_sum(pred * pred, axes) + reduce_sum(target * target, axes) + xi
    return 1.0 - (2.0 * inter + xi) / denom


def dice_loss(pred: Tensor, target, xi: float = 1e-5, batched: bool = False) -> Tensor:
    """Soft Dice loss ``1 - (2*sum(p*y) + xi) / (sum(p^2) + sum(y^2) + xi)``.

    With ``batched=True`` axis 0 indexes samples and the per-sample losses are
    averaged; otherwise every element belongs to one sample.
    """
    target = _const(target, pred)
    _same_shape(pred, target, "dice_loss")
    if batched:
        return reduce_mean(_dice_per_sample(pred, target, xi))
    flat = (1, pred.size)
    return reshape(_dice_per_sample(reshape(pred, flat), reshape(target, flat), xi), ())


def _wmse_per_sample(recon: Tensor, hr_image: Tensor, lesion_mask: Tensor, lambda1: float, lambda2: float) -> Tensor:
    m = lesion_mask.data
    weight = Tensor((lambda1 * m + lambda2 * (1.0 - m)).astype(recon.dtype))
    diff = recon - hr_image
    per_sample = int(np.prod(recon.shape[1:]))
    return reduce_sum(weight * diff * diff, tuple(range(1, recon.ndim))) * (1.0 / per_sample)


def weighted_mse_loss(recon: Tensor, hr_image, lesion_mask, lambda1: float = 0.8, lambda2: float = 0.2) -> Tensor:
    """Squared error split into lesion and background voxels, both divided by the voxel count."""
    hr_image = _const(hr_image, recon)
    lesion_mask = _const(lesion_mask, recon)
    _same_shape(recon, hr_image, "weighted_mse_loss")
    _same_shape(recon, lesion_mask, "weighted_mse_loss")
    flat = (1, recon.size)
    loss = _wmse_per_sample(reshape(recon, flat), reshape(hr_image, flat), reshape(lesion_mask, flat), lambda1, lambda2)
    return reshape(loss, ())


def pooled_extent(extents: Sequence[int]) -> Tuple[int, ...]:
    return tuple(max(1, int(e) // 16) for e in extents)


def gram(flat: Tensor) -> Tensor:
    """``F^T F`` for (channels, positions) or batched (N, channels, positions) matrices."""
    axes = (1, 0) if flat.ndim == 2 else (0, 2, 1)
    return matmul(transpose(flat, axes), flat)


def gram_batch(feature: Tensor, pool_to: Optional[Sequence[int]] = None) -> Tensor:
    """Per-sample spatial Gram matrices, (N, m, m), of an (N, C, *spatial) feature map.

    Each sample is average-pooled to ``max(1, extent // 16)`` per axis (or
    ``pool_to``), flattened to C x m and contracted over channels.
    """
    if feature.ndim < 3:
        raise ContractError(f"gram needs an (N, C, spatial...) tensor, got {feature.shape}")
    target = tuple(pool_to) if pool_to is not None else pooled_extent(feature.shape[2:])
    pooled = adaptive_avg_pool(feature, target)
    n, c = feature.shape[:2]
    return gram(reshape(pooled, (n, c, int(np.prod(target)))))


def gram_feature(feature: Tensor, pool_to: Optional[Sequence[int]] = None) -> Tensor:
    """Spatial Gram matrix (m x m) of one sample given as (1, C, *spatial)."""
    if feature.ndim < 3 or feature.shape[0] != 1:
        raise ContractError(f"gram_feature expects a single-sample (1, C, ...) tensor, got {feature.shape}")
    g = gram_batch(feature, pool_to)
    return reshape(g, g.shape[1:])


def _gram_distance(ga: Tensor, gb: Tensor) -> Tensor:
    diff = ga - gb
    m = ga.shape[-1]
    return reduce_sum(diff * diff, (1, 2)) * (1.0 / (m * m))


def _fa_per_sample(feat_seg: Tensor, feat_sr: Tensor) -> Tensor:
    _same_sample_shape(feat_seg, feat_sr, "fa_loss")
    return _gram_distance(gram_batch(feat_seg), gram_batch(feat_sr))


def fa_loss(feat_seg: Tensor, feat_sr: Tensor) -> Tensor:
    """Mean squared difference between the two branches' spatial feature Grams."""
    return reduce_mean(_fa_per_sample(feat_seg, feat_sr))


def stack_scale_maps(maps: Sequence[Tensor]) -> Tensor:
    """Resize every single-channel map to the largest map's extents and concatenate channels."""
    largest = max(maps, key=lambda m: (int(np.prod(m.shape[2:])), m.shape[2:]))
    target = largest.shape[2:]
    resized = [m if m.shape[2:] == target else resize_linear(m, target) for m in maps]
    return concat(resized, axis=1)


def gram_scale(maps: Sequence[Tensor]) -> Tensor:
    """Per-sample Grams of the stacked scale maps, (N, m, m)."""
    return gram_batch(stack_scale_maps(maps))


def _sa_per_sample(maps_seg: Sequence[Tensor], maps_sr: Sequence[Tensor], expected: int) -> Tensor:
    maps_seg, maps_sr = list(maps_seg), list(maps_sr)
    for name, maps in (("maps_seg", maps_seg), ("maps_sr", maps_sr)):
        if len(maps) != expected:
            raise ContractError(f"sa_loss: {name} holds {len(maps)} scale maps, expected {expected}")
        for m in maps:
            if m.ndim < 3 or m.shape[1] != 1:
                raise ContractError(f"sa_loss: scale maps must be single-channel (N, 1, ...), got {m.shape}")
    for a, b in zip(maps_seg, maps_sr):
        _same_sample_shape(a, b, "sa_loss")
    return _gram_distance(gram_scale(maps_seg), gram_scale(maps_sr))


def sa_loss(maps_seg: Sequence[Tensor], maps_sr: Sequence[Tensor], expected: int = 12) -> Tensor:
    """Mean squared difference between the Grams of the two branches' stacked scale maps."""
    return reduce_mean(_sa_per_sample(maps_seg, maps_sr, expected))


def total_loss(
    bundle, hr_image, hr_mask, weights: LossWeights = LossWeights(), reduction: str = "mean"
) -> Tuple[Tensor, Dict[str, float]]:
    """Combined objective ``L_lmsr + alpha*L_lisr + beta*L_fa + gamma*L_sa``.

    Terms whose weight is zero, or whose inputs are absent from ``bundle``
    (single-path model, no scale maps), are not evaluated and report 0.
    Returns the loss (batch mean, or the (N,) per-sample vector with
    ``reduction="none"``) and the batch-mean unweighted value of every term.
    """
    seg_logits = bundle.seg_logits_hr
    hr_image = _const(hr_image, seg_logits)
    hr_mask = _const(hr_mask, seg_logits)
    if seg_logits.shape[1:] != hr_mask.shape[1:]:
        raise ContractError(f"total_loss: seg output {seg_logits.shape} does not match mask {hr_mask.shape}")

    terms: Dict[str, Tensor] = {}
    terms["lmsr"] = _dice_per_sample(sigmoid(seg_logits), hr_mask, weights.xi)
    total = terms["lmsr"]
    if weights.alpha > 0 and bundle.sr_image_hr is not None:
        if bundle.sr_image_hr.shape[1:] != hr_image.shape[1:]:
            raise ContractError(
                f"total_loss: SR output {bundle.sr_image_hr.shape} does not match image {hr_image.shape}"
            )
        terms["lisr"] = _wmse_per_sample(bundle.sr_image_hr, hr_image, hr_mask, weights.lambda1, weights.lambda2)
        total = total + weights.alpha * terms["lisr"]
    if weights.beta > 0 and bundle.fa_feature_seg is not None and bundle.fa_feature_sr is not None:
        terms["fa"] = _fa_per_sample(bundle.fa_feature_seg, bundle.fa_feature_sr)
        total = total + weights.beta * terms["fa"]
    if weights.gamma > 0 and bundle.scale_maps_seg and bundle.scale_maps_sr:
        terms["sa"] = _sa_per_sample(bundle.scale_maps_seg, bundle.scale_maps_sr, len(bundle.scale_maps_seg))
        total = total + weights.gamma * terms["sa"]

    breakdown = {name: float(terms[name].data.mean()) if name in terms else 0.0 for name in TERMS}
    if reduction == "none":
        breakdown["total"] = float(total.data.mean())
        return total, breakdown
    total = reduce_mean(total)
    breakdown["total"] = float(total.data)
    return total, breakdown


def metrics(pred_prob, target, threshold: float = 0.5) -> Dict[str, float]:
    """DSC and IOU of the thresholded prediction, MAE of the soft prediction.

    DSC and IOU are 1 when prediction and target are both empty.
    """
    p = np.asarray(pred_prob.data if isinstance(pred_prob, Tensor) else pred_prob, dtype=np.float64)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if p.shape != y.shape:
        raise ContractError(f"metrics: shapes differ, {p.shape} vs {y.shape}")
    pb = p >= threshold
    yb = y > 0.5
    inter = int(np.count_nonzero(pb & yb))
    sp, sy = int(np.count_nonzero(pb)), int(np.count_nonzero(yb))
    union = sp + sy - inter
    dsc = 1.0 if sp + sy == 0 else 2.0 * inter / (sp + sy)
    iou = 1.0 if union == 0 else inter / union
    mae = float(np.mean(np.abs(p - y))) if p.size else 0.0
    return {"dsc": dsc, "iou": iou, "mae": mae}
