"""Loss and penalty kernels for the masked contrastive min-max game.

All kernels are pure functions of their tensor inputs and are differentiable
through torch autograd.  Mask-valued arguments may be a single ``[H, W]`` map
or a batch ``[B, H, W]``; batched inputs return the mean of the per-image
penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ContractViolation, NumericError

# Minimum L2 norm below which an embedding cannot be safely normalized.
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class PenaltyWeights:
    """Weights and constants of the masker's regularizers.

    ``budget_b`` is the target fraction of pixels each mask removes and
    ``temperature_tau`` the contrastive softmax temperature.
    """

    budget_weight: float = 1.0
    overlap_weight: float = 1e-4
    consistency_weight: float = 1e-4
    budget_b: float = 0.25
    temperature_tau: float = 0.2

    def __post_init__(self) -> None:
        if not (0.0 < self.budget_b < 1.0):
            raise ContractViolation(f"budget_b must be in (0, 1), got {self.budget_b}")
        if self.temperature_tau <= 0.0:
            raise ContractViolation(f"temperature_tau must be > 0, got {self.temperature_tau}")
        for name in ("budget_weight", "overlap_weight", "consistency_weight"):
            if getattr(self, name) < 0.0:
                raise ContractViolation(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class LossBreakdown:
    """One step's loss terms.

    ``contrastive``, ``budget``, ``overlap`` and ``consistency`` are means over
    the N masks, so the exact composition

        adversary_objective = contrastive - budget_weight * budget
                              - overlap_weight * overlap
                              - consistency_weight * consistency

    holds, and ``encoder_objective == contrastive``.  Fields hold floats in
    telemetry; inside the training step they may hold 0-d tensors so the
    masker can ascend ``adversary_objective`` directly.
    """

    contrastive: float
    budget: float
    overlap: float
    consistency: float
    adversary_objective: float
    encoder_objective: float

    def as_floats(self) -> "LossBreakdown":
        return replace(self, **{k: float(getattr(self, k)) for k in (
            "contrastive", "budget", "overlap", "consistency",
            "adversary_objective", "encoder_objective")})


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values in {what}")


def _as_mask_batch(m: torch.Tensor, what: str = "mask") -> torch.Tensor:
    """Validate a mask and promote it to ``[B, H, W]``."""
    if not isinstance(m, torch.Tensor) or m.dim() not in (2, 3):
        raise ContractViolation(f"{what} must be a [H, W] or [B, H, W] tensor")
    _check_finite(m, what)
    if bool((m < 0).any()) or bool((m > 1).any()):
        raise ContractViolation(f"{what} values must lie in [0, 1]")
    return m.unsqueeze(0) if m.dim() == 2 else m


def nt_xent_masked(z_a: torch.Tensor, z_b: torch.Tensor, tau: float = 0.2) -> torch.Tensor:
    """Symmetric NT-Xent over the 2B views formed by two embedding batches.

    ``z_b`` is normally the embedding of the masked view; the kernel itself is
    agnostic to how either batch was produced.  Embeddings are L2-normalized
    internally, every anchor's positive is its paired view, and the 2B - 2
    remaining views act as negatives.  Returns the mean per-anchor loss.
    """
    if z_a.dim() != 2 or z_b.dim() != 2 or z_a.shape != z_b.shape:
        raise ContractViolation(
            f"embedding batches must be [B, d] with equal shapes, got {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    if z_a.shape[0] < 2:
        raise ContractViolation("contrastive loss needs batch size >= 2 (no negatives otherwise)")
    if tau <= 0:
        raise ContractViolation(f"temperature must be > 0, got {tau}")
    _check_finite(z_a, "z_a")
    _check_finite(z_b, "z_b")

    b = z_a.shape[0]
    z = torch.cat([z_a, z_b], dim=0)
    norms = z.norm(dim=1)
    if bool((norms < _NORM_FLOOR).any()):
        raise NumericError("zero-norm embedding vector, cosine similarity undefined")
    z = z / norms.unsqueeze(1)

    sim = (z @ z.t()) / tau
    eye = torch.eye(2 * b, dtype=torch.bool, device=sim.device)
    # Anchor i is excluded from its own softmax; the positive stays in.
    sim = sim.masked_fill(eye, float("-inf"))
    pos = torch.arange(2 * b, device=sim.device)
    pos = torch.where(pos < b, pos + b, pos - b)
    log_den = torch.logsumexp(sim, dim=1)
    log_num = sim[torch.arange(2 * b, device=sim.device), pos]
    return (log_den - log_num).mean()


def budget_penalty(m: torch.Tensor, b: float) -> torch.Tensor:
    """Squared deviation of the mask's mean from the budget: ``(mean(m) - b)^2``.

    Using the mean rather than the raw pixel sum makes ``b`` a resolution
    independent fraction of removed pixels.
    """
    if not (0.0 < b < 1.0):
        raise ContractViolation(f"budget b must be in (0, 1), got {b}")
    mb = _as_mask_batch(m)
    dev = mb.mean(dim=(1, 2)) - b
    return (dev * dev).mean()


def overlap_penalty(m_i: torch.Tensor, prior: Sequence[torch.Tensor]) -> torch.Tensor:
    """Pixel-normalized dot product of a mask with the sum of earlier masks.

    ``(1 / (H * W)) * sum_p m_i[p] * sum_{j<i} m_j[p]``; zero for the first
    mask (empty ``prior``).
    """
    mb = _as_mask_batch(m_i, "m_i")
    if len(prior) == 0:
        return torch.zeros((), dtype=mb.dtype, device=mb.device)
    prior_batches = []
    for k, p in enumerate(prior):
        pb = _as_mask_batch(p, f"prior[{k}]")
        if pb.shape != mb.shape:
            raise ContractViolation(
                f"prior[{k}] shape {tuple(pb.shape)} does not match mask shape {tuple(mb.shape)}")
        prior_batches.append(pb)
    prior_sum = torch.stack(prior_batches, dim=0).sum(dim=0)
    per_image = (mb * prior_sum).sum(dim=(1, 2)) / (mb.shape[1] * mb.shape[2])
    return per_image.mean()


def average_pool_3x3(m: torch.Tensor) -> torch.Tensor:
    """Stride-1, same-size 3x3 average pool over valid (in-bounds) neighbors.

    Border pixels average over their 4 or 6 in-bounds neighbors only, so a
    constant map is an exact fixed point.
    """
    mb = m.unsqueeze(0) if m.dim() == 2 else m
    x = mb.unsqueeze(1)
    kernel = torch.ones(1, 1, 3, 3, dtype=x.dtype, device=x.device)
    sums = F.conv2d(x, kernel, padding=1)
    counts = F.conv2d(torch.ones_like(x), kernel, padding=1)
    pooled = (sums / counts).squeeze(1)
    return pooled.squeeze(0) if m.dim() == 2 else pooled


def consistency_penalty(m: torch.Tensor) -> torch.Tensor:
    """Squared distance between a mask and its 3x3 average-pooled version.

    The norm is the plain sum of squared per-pixel differences, so smooth
    masks score near zero and isolated pixels are penalized.
    """
    mb = _as_mask_batch(m)
    pooled = average_pool_3x3(mb)
    per_image = ((mb - pooled) ** 2).sum(dim=(1, 2))
    return per_image.mean()


def encoder_objective(per_mask_losses: Sequence) -> torch.Tensor:
    """Mean of the N per-mask contrastive losses; the encoder minimizes this."""
    if len(per_mask_losses) == 0:
        raise ContractViolation("need at least one per-mask loss")
    if isinstance(per_mask_losses[0], torch.Tensor):
        return torch.stack(list(per_mask_losses)).mean()
    return sum(per_mask_losses) / len(per_mask_losses)


def adversary_objective(per_mask: Sequence[tuple], w: PenaltyWeights) -> LossBreakdown:
    """Compose per-mask (contrastive, budget, overlap, consistency) tuples.

    The masker ascends ``(1/N) * sum_i [contrastive_i - w_b * budget_i
    - w_o * overlap_i - w_c * consistency_i]``; penalties sit inside the 1/N
    average, so the objective is linear in each penalty with slope
    ``-weight / N``.  Accepts floats or 0-d tensors.
    """
    if len(per_mask) == 0:
        raise ContractViolation("need at least one per-mask term")
    n = len(per_mask)
    contrastive = sum(t[0] for t in per_mask) / n
    budget = sum(t[1] for t in per_mask) / n
    overlap = sum(t[2] for t in per_mask) / n
    consistency = sum(t[3] for t in per_mask) / n
    adversary = (contrastive
                 - w.budget_weight * budget
                 - w.overlap_weight * overlap
                 - w.consistency_weight * consistency)
    return LossBreakdown(
        contrastive=contrastive,
        budget=budget,
        overlap=overlap,
        consistency=consistency,
        adversary_objective=adversary,
        encoder_objective=contrastive,
    )
