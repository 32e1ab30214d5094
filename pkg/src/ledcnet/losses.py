"""Focal loss and the two-output training objective."""
import math

import torch
import torch.nn.functional as F

from .config import FocalParams
from .errors import DataError, ParameterError

EPS = 1e-7


def focal_term(p_t, params: FocalParams):
    """Per-pixel ``-alpha * (1 - p_t)**gamma * log(p_t)`` without clamping."""
    if not torch.is_tensor(p_t):
        p_t = torch.tensor(p_t, dtype=torch.float64)
    return -params.alpha * (1 - p_t) ** params.gamma * torch.log(p_t)


def _check_targets(targets, num_classes, ignore_index):
    bad = (targets < 0) | (targets >= num_classes)
    if ignore_index is not None:
        bad &= targets != ignore_index
    if bad.any():
        where = tuple(int(i) for i in bad.nonzero()[0])
        raise DataError(
            f"target value {int(targets[where])} at pixel (n, h, w) = {where} is outside "
            f"[0, {num_classes}) and is not the ignore index {ignore_index}")


def focal_loss(logits, targets, params: FocalParams = FocalParams(), ignore_index=255):
    """Mean focal loss over non-ignored pixels.

    logits: (N, C, H, W); targets: (N, H, W) integer class indices. ``p_t`` is
    clamped to ``[1e-7, 1 - 1e-7]`` before the log. Returns 0 when every
    pixel is ignored.
    """
    if logits.dim() != 4 or targets.shape != (logits.shape[0], *logits.shape[2:]):
        raise DataError(
            f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} do not match")
    targets = targets.long()
    _check_targets(targets, logits.shape[1], ignore_index)
    valid = targets != ignore_index if ignore_index is not None else torch.ones_like(targets, dtype=torch.bool)
    safe = torch.where(valid, targets, torch.zeros_like(targets))

    log_p = F.log_softmax(logits, dim=1)
    log_pt = log_p.gather(1, safe.unsqueeze(1)).squeeze(1)
    # clamping log p_t is the same as clamping p_t, minus an exp/log round trip
    log_pt = log_pt.clamp(math.log(EPS), math.log1p(-EPS))
    p_t = log_pt.exp()
    loss = -params.alpha * (1 - p_t) ** params.gamma * log_pt

    n_valid = valid.sum()
    if n_valid == 0:
        return loss.sum() * 0
    return (loss * valid).sum() / n_valid


def combined_loss(out, targets, params: FocalParams = FocalParams(), aux_weight=0.4,
                  ignore_index=255):
    """Focal loss on the refined logits plus ``aux_weight`` times the loss on
    the coarse (region) logits."""
    if aux_weight < 0:
        raise ParameterError(f"aux_weight must be >= 0, got {aux_weight}")
    loss = focal_loss(out.refined_logits, targets, params, ignore_index)
    if aux_weight:
        loss = loss + aux_weight * focal_loss(out.coarse_logits, targets, params, ignore_index)
    return loss
