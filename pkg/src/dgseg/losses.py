"""Training objectives.

Contrastive terms take flattened, already-normalized pixel embeddings:
``anchors`` and ``positives`` are ``[n, C]`` rows that correspond position by
position (same index map), ``labels`` is ``[n]``. Pixels labelled
``ignore_id`` are dropped before anything else.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import DataIntegrityError, ShapeError
from .wilddict import ContentStore

IGNORE_ID = 255
PROB_CLAMP = 1e-8
TAU = 0.07


def _result(loss, count, return_count):
    return (loss, count) if return_count else loss


def _check_labels(label: torch.Tensor, num_classes: int, ignore_id: int) -> torch.Tensor:
    valid = label != ignore_id
    bad = valid & ((label < 0) | (label >= num_classes))
    if bad.any():
        raise DataIntegrityError(
            f"label ids {sorted(set(label[bad].tolist()))[:5]} outside 0..{num_classes - 1}"
        )
    return valid


def seg_ce(pred, label, ignore_id: int = IGNORE_ID, *, from_logits: bool = False, return_count: bool = False):
    """Mean over non-ignored pixels of ``-log p[true class]``.

    ``pred`` is ``[K, H, W]`` or ``[N, K, H, W]``: probabilities, or logits
    when ``from_logits``. Probabilities are clamped at 1e-8 before the log.
    With every pixel ignored the loss is 0 and the count is 0.
    """
    pred = torch.as_tensor(pred)
    label = torch.as_tensor(label).long()
    if pred.shape[:-3] + pred.shape[-2:] != label.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and label {tuple(label.shape)} misaligned")
    k_dim = pred.dim() - 3
    valid = _check_labels(label, pred.shape[k_dim], ignore_id)
    logp = F.log_softmax(pred, dim=k_dim) if from_logits else pred.clamp_min(PROB_CLAMP).log()
    count = int(valid.sum())
    if count == 0:
        return _result(pred.sum() * 0.0, 0, return_count)
    picked = logp.gather(k_dim, label.clamp(0, pred.shape[k_dim] - 1).unsqueeze(k_dim)).squeeze(k_dim)
    return _result(-(picked * valid).sum() / count, count, return_count)


def _contrastive(anchors, positives, labels, ignore_id):
    anchors, positives = torch.as_tensor(anchors), torch.as_tensor(positives)
    labels = torch.as_tensor(labels).long()
    if anchors.shape != positives.shape or anchors.dim() != 2 or labels.shape != anchors.shape[:1]:
        raise ShapeError(
            f"anchors {tuple(anchors.shape)}, positives {tuple(positives.shape)}, "
            f"labels {tuple(labels.shape)} must be [n,C], [n,C], [n]"
        )
    keep = labels != ignore_id
    return anchors[keep], positives[keep], labels[keep]


def _negative_logits(anchors, positives, labels, tau):
    """``[n, n]`` scaled similarities with non-negatives masked to -inf."""
    sim = anchors @ positives.T / tau
    negative = labels[:, None] != labels[None, :]
    return sim.masked_fill(~negative, float("-inf"))


def _info_nce(pos_logit, neg_logits):
    return torch.logsumexp(torch.cat([pos_logit[:, None], neg_logits], dim=1), dim=1) - pos_logit


def sce_loss(anchors, positives, labels, tau: float = TAU, ignore_id: int = IGNORE_ID, *, return_count: bool = False):
    """Source content extension: each anchor against its own stylized counterpart.

    Negatives for anchor i are the stylized embeddings of every valid pixel
    with a different label; same-class pixels elsewhere are left out.
    """
    a, p, y = _contrastive(anchors, positives, labels, ignore_id)
    if len(y) == 0:
        return _result(torch.as_tensor(anchors).sum() * 0.0, 0, return_count)
    pos = (a * p).sum(dim=1) / tau
    per_pixel = _info_nce(pos, _negative_logits(a, p, y, tau))
    return _result(per_pixel.mean(), len(y), return_count)


def wce_loss(anchors, positives, labels, store: ContentStore, tau: float = TAU,
             ignore_id: int = IGNORE_ID, *, return_count: bool = False):
    """Wild content extension: the positive is the stored wild entry nearest the stylized embedding.

    Retrieval uses the stylized embedding; the retrieved entry is scored
    against the anchor. Negatives are the same set as :func:`sce_loss`.
    """
    a, p, y = _contrastive(anchors, positives, labels, ignore_id)
    if len(y) == 0:
        return _result(torch.as_tensor(anchors).sum() * 0.0, 0, return_count)
    wild, _ = store.nearest(p.detach())
    pos = (a * wild.to(a.dtype)).sum(dim=1) / tau
    per_pixel = _info_nce(pos, _negative_logits(a, p, y, tau))
    return _result(per_pixel.mean(), len(y), return_count)


def cel_loss(anchors, positives, labels, store: ContentStore, tau: float = TAU, ignore_id: int = IGNORE_ID):
    return sce_loss(anchors, positives, labels, tau, ignore_id) + wce_loss(
        anchors, positives, labels, store, tau, ignore_id
    )


def scr_loss(p_src, p_stylized, *, from_logits: bool = False):
    """Mean per-pixel ``KL(p_src || p_stylized)`` over the class axis.

    ``p_src`` is a fixed target (detached). Inputs are ``[K,H,W]`` or
    ``[N,K,H,W]``; with ``from_logits`` both are converted by softmax.
    """
    p_src, p_stylized = torch.as_tensor(p_src), torch.as_tensor(p_stylized)
    if p_src.shape != p_stylized.shape:
        raise ShapeError(f"shapes {tuple(p_src.shape)} and {tuple(p_stylized.shape)} differ")
    k_dim = p_src.dim() - 3
    if from_logits:
        target = F.softmax(p_src.detach(), dim=k_dim)
        log_q = F.log_softmax(p_stylized, dim=k_dim)
        log_q = torch.maximum(log_q, log_q.new_tensor(PROB_CLAMP).log())
    else:
        target = p_src.detach()
        log_q = p_stylized.clamp_min(PROB_CLAMP).log()
    log_p = target.clamp_min(PROB_CLAMP).log()
    per_pixel = (target * (log_p - log_q)).sum(dim=k_dim)
    # rounding can leave identical distributions a hair below zero
    return per_pixel.clamp_min(0.0).mean()


@dataclass
class LossWeights:
    orig: float = 1.0
    cel: float = 1.0
    sel: float = 1.0
    scr: float = 1.0

    def __post_init__(self):
        for name in ("orig", "cel", "sel", "scr"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class LossTerms:
    """Scalar loss components; the CEL weight applies to ``l_sce + l_wce``."""

    l_orig: torch.Tensor | float = 0.0
    l_sce: torch.Tensor | float = 0.0
    l_wce: torch.Tensor | float = 0.0
    l_sel: torch.Tensor | float = 0.0
    l_scr: torch.Tensor | float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def l_cel(self):
        return self.l_sce + self.l_wce

    @property
    def total(self):
        return total_loss(self)

    def as_floats(self) -> dict[str, float]:
        out = {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("l_orig", "l_sce", "l_wce", "l_sel", "l_scr")}
        out["total"] = float(torch.as_tensor(self.total).detach())
        return out


def total_loss(terms: LossTerms):
    w = terms.weights
    return w.orig * terms.l_orig + w.cel * terms.l_cel + w.sel * terms.l_sel + w.scr * terms.l_scr


# cumulative loss configurations of the loss ablation, as (orig, cel, sel, scr) weights
ABLATION_ROWS = {
    "orig": LossWeights(1, 0, 0, 0),
    "orig+cel": LossWeights(1, 1, 0, 0),
    "orig+cel+sel": LossWeights(1, 1, 1, 0),
    "all": LossWeights(1, 1, 1, 1),
}
