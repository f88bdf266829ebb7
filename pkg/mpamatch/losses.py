"""
Training objectives.

Probability maps are N x C x H x W. Prototype scores are N x P matrices over pixels,
with P = C * K and prototype j belonging to class j // K.
"""

import logging
import math
from typing import NamedTuple

import torch
import torch.nn.functional as F

from mpamatch.exceptions import NumericAbort, ShapeError
from mpamatch.models import LossReport, LossWeights

logger = logging.getLogger(__name__)

_TINY = 1e-12


class SupervisedTerms(NamedTuple):
    total: torch.Tensor
    ce: torch.Tensor
    dice: torch.Tensor


class ProtoLossTerm(NamedTuple):
    """A prototype loss value; empty is True when no pixel was valid."""

    value: torch.Tensor
    empty: bool


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """N x H x W index mask -> N x C x H x W float one-hot."""
    return F.one_hot(labels.long(), num_classes).permute(0, 3, 1, 2).float()


def supervised_loss(probabilities: torch.Tensor, onehot: torch.Tensor, eps: float = 1e-6) -> SupervisedTerms:
    """
    Half the sum of cross-entropy and Dice loss.

    CE is the mean per-pixel negative log-likelihood. Dice is computed per (image, class)
    over flattened pixels, background included, then averaged.
    """
    if probabilities.shape != onehot.shape:
        raise ShapeError(
            f"Probabilities {tuple(probabilities.shape)} and one-hot {tuple(onehot.shape)} differ"
        )
    onehot = onehot.to(probabilities)
    ce = -(onehot * probabilities.clamp_min(_TINY).log()).sum(dim=1).mean()

    dims = tuple(range(2, probabilities.dim()))
    intersection = (probabilities * onehot).sum(dim=dims)
    denominator = probabilities.sum(dim=dims) + onehot.sum(dim=dims)
    dice = (1.0 - (2.0 * intersection + eps) / (denominator + eps)).mean()
    return SupervisedTerms(0.5 * (ce + dice), ce, dice)


def supervised_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor, eps: float = 1e-6) -> SupervisedTerms:
    return supervised_loss(torch.softmax(logits, dim=1), one_hot(labels, logits.shape[1]), eps)


def _stream_ce(target: torch.Tensor, probabilities: torch.Tensor, soft: bool) -> torch.Tensor:
    """Per-pixel cross-entropy of a stream against its pseudo-label source."""
    log_p = probabilities.clamp_min(_TINY).log()
    if soft:
        return -(target * log_p).sum(dim=1)
    hard = target.argmax(dim=1, keepdim=True)
    return -log_p.gather(1, hard).squeeze(1)


def _retained_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    kept = mask.sum()
    if kept == 0:
        return values.sum() * 0.0
    return (values * mask).sum() / kept


def unlabeled_loss(
    p_w: torch.Tensor,
    p_fp: torch.Tensor,
    p_s1: torch.Tensor,
    p_s2: torch.Tensor,
    weights: LossWeights,
    target_s1: torch.Tensor | None = None,
    target_s2: torch.Tensor | None = None,
) -> tuple[torch.Tensor, float]:
    """
    Dual-stream consistency against the weak-view pseudo-label.

    Each stream's cross-entropy is averaged over the pixels whose pseudo-label source is
    at least tau confident; the strong streams may use CutMix-mixed sources. The loss is
    lam * H(fp) + mu / 2 * (H(s1) + H(s2)).

    Returns:
        The loss and the retention fraction of the weak pseudo-label.
    """
    for name, tensor in (("p_fp", p_fp), ("p_s1", p_s1), ("p_s2", p_s2)):
        if tensor.shape != p_w.shape:
            raise ShapeError(f"{name} shape {tuple(tensor.shape)} differs from p_w {tuple(p_w.shape)}")
    p_w = p_w.detach()
    target_s1 = p_w if target_s1 is None else target_s1.detach()
    target_s2 = p_w if target_s2 is None else target_s2.detach()
    soft = weights.soft_pseudo

    def term(target: torch.Tensor, probabilities: torch.Tensor) -> torch.Tensor:
        mask = (target.max(dim=1).values >= weights.tau).to(probabilities)
        return _retained_mean(_stream_ce(target, probabilities, soft), mask)

    retention = float((p_w.max(dim=1).values >= weights.tau).float().mean())
    loss = weights.lam * term(p_w, p_fp) + weights.mu / 2.0 * (term(target_s1, p_s1) + term(target_s2, p_s2))
    return loss, retention


def _masked(sim: torch.Tensor, y: torch.Tensor, valid: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
    if y.shape != sim.shape[:1]:
        raise ShapeError(f"Expected {sim.shape[0]} prototype indices, got {tuple(y.shape)}")
    if valid is None:
        return sim, y.long()
    valid = valid.bool()
    return sim[valid], y[valid].long()


def pal_loss(
    sim: torch.Tensor,
    y: torch.Tensor,
    temperature: float = 1.0,
    valid: torch.Tensor | None = None,
) -> ProtoLossTerm:
    """Mean over valid pixels of -log softmax(z_i / t)[y_i]."""
    z, target = _masked(sim, y, valid)
    if target.numel() == 0:
        logger.warning("Prototype alignment loss has no valid pixels")
        return ProtoLossTerm(sim.sum() * 0.0, True)
    return ProtoLossTerm(F.cross_entropy(z / temperature, target), False)


def pcl_loss(
    sim: torch.Tensor,
    y: torch.Tensor,
    num_prototypes: int,
    temperature: float = 1.0,
    valid: torch.Tensor | None = None,
) -> ProtoLossTerm:
    """
    Contrast each pixel's assigned prototype against other-class prototypes only.

    Same-class siblings of y_i are removed from the softmax denominator.
    """
    if sim.shape[1] % num_prototypes:
        raise ShapeError(f"{sim.shape[1]} prototypes are not divisible by K={num_prototypes}")
    z, target = _masked(sim, y, valid)
    if target.numel() == 0:
        logger.warning("Prototype contrast loss has no valid pixels")
        return ProtoLossTerm(sim.sum() * 0.0, True)

    proto_class = torch.arange(sim.shape[1], device=sim.device) // num_prototypes
    sibling = proto_class.unsqueeze(0) == (target // num_prototypes).unsqueeze(1)
    sibling[torch.arange(target.numel()), target] = False
    z = (z / temperature).masked_fill(sibling, float("-inf"))
    return ProtoLossTerm(F.cross_entropy(z, target), False)


def _mean_present(*terms: torch.Tensor | None) -> torch.Tensor | None:
    present = [t for t in terms if t is not None]
    if not present:
        return None
    return sum(present) / len(present)


def total_loss(
    label: SupervisedTerms,
    weights: LossWeights,
    unlabel: torch.Tensor | None = None,
    retention: float = 0.0,
    pal_visual: torch.Tensor | None = None,
    pcl_visual: torch.Tensor | None = None,
    pal_text: torch.Tensor | None = None,
    pcl_text: torch.Tensor | None = None,
    proto_head: torch.Tensor | None = None,
    step: int | None = None,
) -> tuple[torch.Tensor, LossReport]:
    """
    Combine all components.

    L_proto = alpha1 * PAL + alpha2 * PCL + head * L_head, where PAL and PCL are averaged
    over the enabled branches; L_total = alpha * L_proto + beta * L_label + gamma * L_unlabel.

    Raises:
        NumericAbort: If any component is non-finite
    """
    components = {
        "loss_label": label.total,
        "loss_ce": label.ce,
        "loss_dice": label.dice,
        "loss_unlabel": unlabel,
        "loss_pal_visual": pal_visual,
        "loss_pal_text": pal_text,
        "loss_pcl_visual": pcl_visual,
        "loss_pcl_text": pcl_text,
        "loss_proto_head": proto_head,
    }
    for name, value in components.items():
        if value is not None and not math.isfinite(float(value)):
            raise NumericAbort(name, step)

    zero = label.total.new_zeros(())
    pal = _mean_present(pal_visual, pal_text)
    pcl = _mean_present(pcl_visual, pcl_text)
    proto = (
        weights.alpha1 * (zero if pal is None else pal)
        + weights.alpha2 * (zero if pcl is None else pcl)
        + weights.head * (zero if proto_head is None else proto_head)
    )
    unlabel = zero if unlabel is None else unlabel
    total = weights.alpha * proto + weights.beta * label.total + weights.gamma * unlabel
    if not math.isfinite(float(total)):
        raise NumericAbort("loss_total", step)

    report = LossReport(
        step=step or 0,
        loss_proto=float(proto),
        loss_total=float(total),
        retention=retention,
        **{name: float(value) if value is not None else 0.0 for name, value in components.items()},
    )
    return total, report
