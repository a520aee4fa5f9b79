"""
Pixel-wise softmax and the weighted cross-entropy / focal loss family.

Two implementations share one definition:

* numpy reference functions returning the loss and its exact gradient with respect
  to the logits (used for checks and small problems);
* ``SegmentationLoss``, the torch module the trainer optimizes, whose autograd
  gradients agree with the reference.

With ``P = softmax(y)``, a true class ``t`` and ``eps = 1e-10``::

    cross entropy:  -w_t * log(max(P_t, eps))
    focal:          -w_t * (1 - P_t)^2 * log(max(P_t, eps))

``reduction='sum'`` adds the pixel terms, ``'mean'`` divides by the pixel count.
"""
import math
from typing import Callable
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel
from scipy import special
from torch import nn

from markerseg.core_types import LabelCube
from markerseg.core_types import LogitCube
from markerseg.core_types import ProbabilityCube
from markerseg.core_types import check_one_hot
from markerseg.utils.exceptions import ConfigError
from markerseg.utils.exceptions import InvalidCubeError
from markerseg.utils.exceptions import InvalidLabelError
from markerseg.utils.exceptions import ShapeError
from markerseg.utils.models.data_models import ClassWeights
from markerseg.utils.models.data_models import LossKind
from markerseg.utils.models.data_models import LossSpec
from markerseg.utils.models.data_models import Reduction

EPSILON = 1e-10
LOG_EPSILON = math.log(EPSILON)
FOCAL_GAMMA = 2.0


class LossResult(BaseModel):
    value: float
    grad: np.ndarray

    class Config:
        arbitrary_types_allowed = True


def softmax_pixelwise(logits: Union[LogitCube, np.ndarray]) -> ProbabilityCube:
    """
    Per-pixel softmax over the class axis.

    Raises:
        InvalidInputError: If the logits are not finite.
    """
    if not isinstance(logits, LogitCube):
        logits = LogitCube(layers=logits)
    return ProbabilityCube(layers=special.softmax(logits.layers, axis=-1))


def _validated(P, L, w: ClassWeights):
    probs = P.layers if isinstance(P, ProbabilityCube) else np.asarray(P, dtype=np.float64)
    labels = L.layers if isinstance(L, LabelCube) else np.asarray(L)
    if probs.shape != labels.shape:
        raise ShapeError('probability and label cubes differ in shape', {
            'probabilities': list(probs.shape), 'labels': list(labels.shape),
        })
    try:
        check_one_hot(labels)
    except InvalidCubeError as exc:
        raise InvalidLabelError('label cube is not one-hot', exc.extra_info) from exc
    weights = np.asarray(w.w, dtype=np.float64)
    if weights.shape != (probs.shape[-1],):
        raise ShapeError('one class weight per layer is required', {
            'weights': len(w.w), 'layers': probs.shape[-1],
        })
    if np.any(weights <= 0):
        raise ConfigError('class weights must be positive', {'weights': w.w})
    return probs, labels.astype(np.float64), weights


def _reduce(per_pixel: np.ndarray, grad: np.ndarray, reduction: Reduction) -> LossResult:
    value = float(per_pixel.sum())
    if reduction == Reduction.MEAN:
        n_pixels = per_pixel.size
        return LossResult(value=value / n_pixels, grad=grad / n_pixels)
    return LossResult(value=value, grad=grad)


def _logit_gradient(s: np.ndarray, probs: np.ndarray) -> np.ndarray:
    # d/dy_k of sum_n f(P_n) where s_n = P_n * f'(P_n)
    return s - probs * s.sum(axis=-1, keepdims=True)


def weighted_cross_entropy(
    P: ProbabilityCube,
    L: LabelCube,
    w: ClassWeights,
    reduction: Reduction = Reduction.MEAN,
) -> LossResult:
    """
    Weighted cross-entropy and its gradient with respect to the logits behind `P`.

    ``w = ClassWeights.equal(n)`` gives the plain cross-entropy.

    Raises:
        ShapeError: If `P`, `L` and `w` disagree in shape.
        InvalidLabelError: If `L` is not one-hot.
    """
    probs, labels, weights = _validated(P, L, w)
    active = probs >= EPSILON
    log_p = np.log(np.maximum(probs, EPSILON))
    per_pixel = -(weights * labels * log_p).sum(axis=-1)
    s = -weights * labels * active
    return _reduce(per_pixel, _logit_gradient(s, probs), reduction)


def focal_loss(
    P: ProbabilityCube,
    L: LabelCube,
    w: ClassWeights,
    reduction: Reduction = Reduction.MEAN,
    detach_focal_factor: bool = False,
) -> LossResult:
    """
    Weighted focal loss with modulating factor ``(1 - P)^2``.

    The gradient differentiates through the modulating factor. With
    `detach_focal_factor` the factor is treated as a constant in the gradient (the
    loss value is unchanged); that gradient is not the derivative of the loss.

    Raises:
        ShapeError: If `P`, `L` and `w` disagree in shape.
        InvalidLabelError: If `L` is not one-hot.
    """
    probs, labels, weights = _validated(P, L, w)
    active = probs >= EPSILON
    log_p = np.log(np.maximum(probs, EPSILON))
    factor = (1.0 - probs) ** FOCAL_GAMMA
    per_pixel = -(weights * factor * labels * log_p).sum(axis=-1)
    if detach_focal_factor:
        s = -weights * labels * factor * active
    else:
        s = weights * labels * (
            FOCAL_GAMMA * (1.0 - probs) * probs * log_p - factor * active
        )
    return _reduce(per_pixel, _logit_gradient(s, probs), reduction)


def reference_loss(spec: LossSpec, logits: Union[LogitCube, np.ndarray], L: LabelCube) -> LossResult:
    """Evaluates `spec` on raw logits with the numpy reference implementation."""
    P = softmax_pixelwise(logits)
    if spec.kind == LossKind.FOCAL:
        return focal_loss(P, L, spec.weights, spec.reduction, spec.detach_focal_factor)
    return weighted_cross_entropy(P, L, spec.weights, spec.reduction)


def finite_difference_gradient(
    loss_fn: Callable[[np.ndarray], float],
    logits: np.ndarray,
    step: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of a scalar function of the logits."""
    base = np.array(logits, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = loss_fn(base)
        flat[i] = original - step
        lower = loss_fn(base)
        flat[i] = original
        grad_flat[i] = (upper - lower) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_loss_spec(spec: LossSpec) -> None:
    if spec.focal_gamma != FOCAL_GAMMA:
        raise ConfigError('only the squared focal factor is supported', {'focal_gamma': spec.focal_gamma})
    if any(v <= 0 for v in spec.weights.w):
        raise ConfigError('class weights must be positive', {'weights': spec.weights.w})


class SegmentationLoss(nn.Module):
    """
    Torch form of the loss family for ``(batch, classes, H, W)`` logits and
    ``(batch, H, W)`` integer targets.
    """

    def __init__(self, spec: LossSpec):
        super().__init__()
        check_loss_spec(spec)
        self.spec = spec
        self.register_buffer('weights', torch.tensor(spec.weights.w, dtype=torch.float64))

    def forward(self, logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        n_classes = logits.shape[1]
        if n_classes != self.weights.numel():
            raise ShapeError('one class weight per logit layer is required', {
                'weights': int(self.weights.numel()), 'layers': int(n_classes),
            })
        if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
            raise ShapeError('logits and target differ in shape', {
                'logits': list(logits.shape), 'target': list(target.shape),
            })
        if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_classes):
            raise InvalidLabelError('target ids out of range', {
                'min': int(target.min()), 'max': int(target.max()),
            })

        log_p = F.log_softmax(logits, dim=1).gather(1, target.unsqueeze(1)).squeeze(1)
        weights = self.weights.to(logits.dtype)[target]
        per_pixel = -weights * torch.clamp(log_p, min=LOG_EPSILON)
        if self.spec.kind == LossKind.FOCAL:
            factor = (1.0 - torch.exp(log_p)) ** FOCAL_GAMMA
            if self.spec.detach_focal_factor:
                factor = factor.detach()
            per_pixel = factor * per_pixel
        if self.spec.reduction == Reduction.SUM:
            return per_pixel.sum()
        return per_pixel.mean()


def loss_from_spec(spec: LossSpec) -> SegmentationLoss:
    return SegmentationLoss(spec)
