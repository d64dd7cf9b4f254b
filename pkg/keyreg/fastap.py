"""FastAP: average precision over soft-binned squared descriptor distances.

For unit-norm descriptors every squared distance lies in [0, 4]. Distances
from an anchor are spread over Q bin centres ``z_j = j * 4 / (Q - 1)`` with
triangular kernels of width ``4 / (Q - 1)``. With positive and total
histograms ``h+`` and ``h`` and their cumulative sums ``H+`` and ``H``, the
anchor's score is ``sum_j h+_j * H+_j / H_j / N+`` and the loss is one minus
the mean score over anchors that have at least one positive and one negative.
"""

import logging
from typing import Sequence, Tuple

import numpy as np
import torch

from .errors import NoNegatives, NonUnitNorm, NoPositives

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-4
_CHUNK = 512


def bin_centers(num_bins: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """Bin centres spanning the squared-distance range [0, 4]."""
    if num_bins < 2:
        raise ValueError("FastAP needs at least 2 bins")
    return torch.linspace(0.0, 4.0, num_bins, dtype=dtype, device=device)


def squared_distances(desc: torch.Tensor) -> torch.Tensor:
    """Pairwise squared Euclidean distances clamped to [0, 4]."""
    sq_norm = (desc * desc).sum(dim=1)
    dist = sq_norm[:, None] + sq_norm[None, :] - 2.0 * desc @ desc.t()
    return dist.clamp(0.0, 4.0)


def check_unit_norm(desc: torch.Tensor, tol: float = NORM_TOLERANCE) -> None:
    norms = desc.detach().norm(dim=1)
    worst = float((norms - 1.0).abs().max()) if len(norms) else 0.0
    if worst > tol:
        raise NonUnitNorm(f"Descriptors must be unit-norm (max deviation {worst:.3g})")


def fastap_loss_tensor(
    desc: torch.Tensor,
    labels: torch.Tensor,
    num_bins: int = 10,
    check_norm: bool = True,
) -> torch.Tensor:
    """Differentiable FastAP loss over a pooled descriptor set.

    Args:
        desc: (N, D) descriptors
        labels: (N,) integer identities; equal labels are positives
        num_bins: number of histogram bins Q
        check_norm: raise NonUnitNorm for descriptors off the unit sphere

    Returns:
        Scalar loss tensor in [0, 1]

    Raises:
        NoPositives: no anchor has a positive partner
        NoNegatives: no anchor with positives also has a negative partner
    """
    if check_norm:
        check_unit_norm(desc)
    n = desc.shape[0]
    labels = labels.to(desc.device)
    centers = bin_centers(num_bins, desc.dtype, desc.device)
    delta = 4.0 / (num_bins - 1)

    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool, device=desc.device)
    pos = same & ~eye
    neg = ~same
    n_pos = pos.sum(dim=1)
    n_neg = neg.sum(dim=1)
    valid = (n_pos > 0) & (n_neg > 0)

    if not bool((n_pos > 0).any()):
        raise NoPositives("No anchor has a positive partner")
    if not bool(valid.any()):
        raise NoNegatives("No anchor with positives has a negative partner")
    skipped = int(n - valid.sum())
    if skipped:
        logger.warning(f"FastAP skipped {skipped} of {n} anchors without positives or negatives")

    dist = squared_distances(desc)
    anchors = torch.nonzero(valid).flatten()
    total = desc.new_zeros(())
    for start in range(0, len(anchors), _CHUNK):
        idx = anchors[start:start + _CHUNK]
        d = dist[idx]
        kernel = torch.relu(1.0 - (d[:, :, None] - centers).abs() / delta)
        p = pos[idx].to(desc.dtype)[:, :, None]
        q = neg[idx].to(desc.dtype)[:, :, None]
        h_pos = (kernel * p).sum(dim=1)
        h_all = h_pos + (kernel * q).sum(dim=1)
        cum_pos = torch.cumsum(h_pos, dim=1)
        cum_all = torch.cumsum(h_all, dim=1)
        ratio = cum_pos / cum_all.clamp_min(1e-12)
        ap = (h_pos * ratio).sum(dim=1) / n_pos[idx].to(desc.dtype)
        total = total + ap.sum()
    return 1.0 - total / len(anchors)


def fastap_loss(
    descriptors: np.ndarray,
    labels: Sequence[int],
    num_bins: int = 10,
    check_norm: bool = True,
) -> Tuple[float, np.ndarray]:
    """FastAP loss and its gradient with respect to the descriptors.

    Evaluated in float64.

    Args:
        descriptors: (N, D) unit-norm descriptors
        labels: N identity labels
        num_bins: number of histogram bins Q

    Returns:
        (loss, gradient of shape (N, D))
    """
    desc = torch.tensor(np.asarray(descriptors, dtype=np.float64), requires_grad=True)
    lab = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    loss = fastap_loss_tensor(desc, lab, num_bins, check_norm)
    loss.backward()
    return float(loss.detach()), desc.grad.numpy().copy()
