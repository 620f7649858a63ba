"""Class-balanced cross-entropy for trinary occupancy targets."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_WEIGHTS = (1.0, 5.0, 1.0)  # free, occupied, unknown


def class_balanced_loss(scores, target, weights=DEFAULT_WEIGHTS):
    """Mean over cells of per-class-weighted cross-entropy.

    scores: (B, 3, H, W) logits; target: (B, H, W) long/uint8 in {0, 1, 2}.
    Divides by the cell count (not the weight sum), so doubling a class
    weight exactly doubles that class's contribution.
    """
    target = torch.as_tensor(target, dtype=torch.long)
    logp = F.log_softmax(torch.as_tensor(scores), dim=1)
    picked = torch.gather(logp, 1, target.unsqueeze(1)).squeeze(1)
    w = torch.as_tensor(weights, dtype=logp.dtype, device=logp.device)[target]
    return -(w * picked).sum() / target.numel()


def effective_number_weights(targets, beta=0.999):
    """Per-class weights by effective number of samples: (1-b)/(1-b^n_c).

    ``targets`` is any array of trinary labels (the training set); weights
    are normalized to sum to the class count. Alternative to the flat
    occupied-weight scheme, selectable via TrainConfig.
    """
    flat = np.asarray(targets).ravel()
    counts = np.array([(flat == c).sum() for c in range(3)], dtype=float)
    counts = np.maximum(counts, 1.0)
    w = (1.0 - beta) / (1.0 - np.power(beta, counts))
    w = w * (len(w) / w.sum())
    return tuple(float(v) for v in w)
