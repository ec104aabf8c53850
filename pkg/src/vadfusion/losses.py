"""Training objectives.

All functions operate on torch tensors with the sample axis leading and reduce
with the batch mean. Composite losses come back as a LossValue whose total is
exactly the declared weighted sum of its components (bookkeeping checked to
1e-9 by the test suite). Gaussian NLL can legitimately be negative (log term),
so nothing here assumes nonnegativity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

BCE_EPS = 1e-7

# keeps sqrt differentiable when a pair collapses to zero distance; the hinge
# value shifts by at most ~2*m*1e-12
_DIST_EPS_SQ = 1e-24


@dataclass
class LossValue:
    total: torch.Tensor
    components: dict[str, torch.Tensor]
    weights: dict[str, float] = field(default_factory=dict)

    def weighted_sum(self) -> torch.Tensor:
        acc = None
        for name, comp in self.components.items():
            term = self.weights.get(name, 1.0) * comp
            acc = term if acc is None else acc + term
        return acc

    def scalars(self) -> dict[str, float]:
        out = {name: float(c.detach()) for name, c in self.components.items()}
        out["total"] = float(self.total.detach())
        return out


def gaussian_nll(mu: torch.Tensor, log_var: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """(y-mu)^2/(2 sigma^2) + log(sigma^2)/2, summed over dims, batch mean."""
    if not (torch.isfinite(mu).all() and torch.isfinite(log_var).all()
            and torch.isfinite(target).all()):
        raise ValueError("gaussian_nll received non-finite inputs")
    var = torch.exp(log_var)
    per_dim = (target - mu) ** 2 / (2.0 * var) + 0.5 * log_var
    per_sample = per_dim.sum(dim=-1)
    return per_sample.mean()


def pair_distance(e_s: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
    """Euclidean distance over the last axis, safe to differentiate at 0."""
    if e_s.shape[-1] != e_t.shape[-1]:
        raise ValueError(f"embedding width mismatch: {e_s.shape[-1]} vs {e_t.shape[-1]}")
    sq = ((e_s - e_t) ** 2).sum(dim=-1)
    return torch.sqrt(torch.clamp(sq, min=_DIST_EPS_SQ))


def margin_loss(e_s: torch.Tensor, e_t: torch.Tensor, y: torch.Tensor,
                m: float) -> torch.Tensor:
    """Contrastive hinge on pair distance; y=1 marks a consistent pair.

    y * d^2 + (1-y) * max(0, m - d)^2 with d = ||e_s - e_t||_2, batch mean.
    """
    if m <= 0:
        raise ValueError(f"margin must be positive, got {m}")
    if e_s.shape[-1] != e_t.shape[-1]:
        raise ValueError(f"embedding width mismatch: {e_s.shape[-1]} vs {e_t.shape[-1]}")
    y = y.to(e_s.dtype)
    sq = ((e_s - e_t) ** 2).sum(dim=-1)
    d = torch.sqrt(torch.clamp(sq, min=_DIST_EPS_SQ))
    hinge = torch.clamp(m - d, min=0.0)
    per_sample = y * sq + (1.0 - y) * hinge ** 2
    return per_sample.mean()


def bce(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy on probabilities, clamped to [1e-7, 1 - 1e-7]."""
    p = torch.clamp(p, BCE_EPS, 1.0 - BCE_EPS)
    t = target.to(p.dtype)
    per_sample = -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p))
    return per_sample.mean()


def classifier_loss(p_inc: torch.Tensor, y_consistent: torch.Tensor,
                    e_s: torch.Tensor, e_t: torch.Tensor,
                    m: float = 0.9, lambda_margin: float = 0.15) -> LossValue:
    """BCE on the inconsistency score plus the weighted margin term.

    The classifier scores P(inconsistent) while the margin convention labels
    consistency y=1, so the BCE target is 1 - y.
    """
    y_inc = 1.0 - y_consistent.to(p_inc.dtype)
    bce_term = bce(p_inc, y_inc)
    margin_term = margin_loss(e_s, e_t, y_consistent, m)
    total = bce_term + lambda_margin * margin_term
    return LossValue(
        total=total,
        components={"bce": bce_term, "margin": margin_term},
        weights={"bce": 1.0, "margin": lambda_margin},
    )


def agreement_target(mu_s: torch.Tensor, log_var_s: torch.Tensor,
                     mu_t: torch.Tensor, log_var_t: torch.Tensor
                     ) -> tuple[torch.Tensor, torch.Tensor]:
    """Inverse-variance pooled Gaussian: the normalized product of the two
    unimodal Gaussians, per dimension. Detached: it is a target, and no
    gradient may reach the frozen towers. No variance floor is applied."""
    prec_s = torch.exp(-log_var_s)
    prec_t = torch.exp(-log_var_t)
    prec = prec_s + prec_t
    mu = (mu_s * prec_s + mu_t * prec_t) / prec
    var = 1.0 / prec
    return mu.detach(), var.detach()


def agreement_loss(mu_f: torch.Tensor,
                   mu_s: torch.Tensor, log_var_s: torch.Tensor,
                   mu_t: torch.Tensor, log_var_t: torch.Tensor) -> torch.Tensor:
    """Gaussian NLL of the fused mean against the agreement target."""
    mu_a, var_a = agreement_target(mu_s, log_var_s, mu_t, log_var_t)
    per_dim = (mu_f - mu_a) ** 2 / (2.0 * var_a) + 0.5 * torch.log(var_a)
    return per_dim.sum(dim=-1).mean()


def fusion_loss(mu_f: torch.Tensor, log_var_f: torch.Tensor,
                target: torch.Tensor | None, labeled: torch.Tensor | None,
                mu_s: torch.Tensor, log_var_s: torch.Tensor,
                mu_t: torch.Tensor, log_var_t: torch.Tensor,
                lambda_agree: float = 1.0) -> LossValue:
    """Supervised NLL on labeled samples plus weighted agreement on all.

    `labeled` is a per-sample bool mask (None means nothing is labeled).
    Raises if there is no labeled sample and lambda_agree == 0: no signal.
    """
    batch = mu_f.shape[0] if mu_f.dim() > 1 else 1
    if labeled is None:
        labeled = torch.zeros(batch, dtype=torch.bool)
    n_labeled = int(labeled.sum())
    if n_labeled == 0 and lambda_agree == 0.0:
        raise ValueError("fusion_loss has no signal: no labels and lambda_agree == 0")

    mu_a, var_a = agreement_target(mu_s, log_var_s, mu_t, log_var_t)
    agree_per = ((mu_f - mu_a) ** 2 / (2.0 * var_a) + 0.5 * torch.log(var_a)).sum(dim=-1)
    agree_term = agree_per.mean()

    if n_labeled > 0:
        var_f = torch.exp(log_var_f)
        nll_per = ((target - mu_f) ** 2 / (2.0 * var_f) + 0.5 * log_var_f).sum(dim=-1)
        # sum over labeled / batch size, so total == nll + lambda * agree exactly
        nll_term = (nll_per * labeled.to(nll_per.dtype)).sum() / batch
    else:
        nll_term = torch.zeros((), dtype=mu_f.dtype)

    total = nll_term + lambda_agree * agree_term
    return LossValue(
        total=total,
        components={"nll": nll_term, "agree": agree_term},
        weights={"nll": 1.0, "agree": lambda_agree},
    )
