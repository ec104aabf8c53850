"""Second-phase heads over frozen tower sequence outputs: the cross-modal
inconsistency classifier and the fusion tower (cross-modal attention block,
gated combination, heteroscedastic head).

Both consume the pre-pooling sequences the towers emit. Speech and text
sequences have different lengths, so the classifier pools each modality to an
utterance vector before concatenating, and the fusion gates are scalar per
modality (softmax-normalized so they always sum to 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .towers import (
    AttentiveStatsPool,
    FeedForward,
    HeteroscedasticHead,
    MultiHeadAttention,
    masked_mean,
)


@dataclass(frozen=True)
class FusionConfig:
    d_in_speech: int = 256
    d_in_text: int = 256
    d_proj: int = 256
    n_heads: int = 4
    dropout: float = 0.1
    crossmodal_block: bool = True     # ablation: bypass the transformer block
    gated: bool = True                # ablation: fixed 0.5/0.5 gates

    def __post_init__(self):
        if self.d_proj % self.n_heads != 0:
            raise ValueError(f"d_proj {self.d_proj} not divisible by n_heads {self.n_heads}")


@dataclass
class ProjectedPair:
    """Projected speech/text sequences plus their masked-mean pooled vectors."""

    s: torch.Tensor           # (B, T_s, D')
    t: torch.Tensor           # (B, T_t, D')
    mask_s: torch.Tensor
    mask_t: torch.Tensor
    pooled_s: torch.Tensor    # (B, D')
    pooled_t: torch.Tensor


class PairProjector(nn.Module):
    """Per-modality linear projection + LayerNorm into a shared width."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.proj_s = nn.Linear(cfg.d_in_speech, cfg.d_proj)
        self.ln_s = nn.LayerNorm(cfg.d_proj)
        self.proj_t = nn.Linear(cfg.d_in_text, cfg.d_proj)
        self.ln_t = nn.LayerNorm(cfg.d_proj)
        self.d_in_speech = cfg.d_in_speech
        self.d_in_text = cfg.d_in_text

    def forward(self, seq_s: torch.Tensor, mask_s: torch.Tensor,
                seq_t: torch.Tensor, mask_t: torch.Tensor) -> ProjectedPair:
        if seq_s.shape[-1] != self.d_in_speech:
            raise ValueError(f"speech width {seq_s.shape[-1]} != expected {self.d_in_speech}")
        if seq_t.shape[-1] != self.d_in_text:
            raise ValueError(f"text width {seq_t.shape[-1]} != expected {self.d_in_text}")
        s = self.ln_s(self.proj_s(seq_s)) * mask_s[..., None]
        t = self.ln_t(self.proj_t(seq_t)) * mask_t[..., None]
        return ProjectedPair(
            s=s, t=t, mask_s=mask_s, mask_t=mask_t,
            pooled_s=masked_mean(s, mask_s), pooled_t=masked_mean(t, mask_t),
        )


class InconsistencyClassifier(nn.Module):
    """Pooled projections -> two linear layers with GELU -> sigmoid score.

    The LayerNorm sits before the final scalar projection: normalizing the
    width-1 output would collapse it to a constant.
    """

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.projector = PairProjector(cfg)
        self.fc1 = nn.Linear(2 * cfg.d_proj, cfg.d_proj)
        self.norm = nn.LayerNorm(cfg.d_proj)
        self.fc2 = nn.Linear(cfg.d_proj, 1)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, seq_s, mask_s, seq_t, mask_t
                ) -> tuple[torch.Tensor, ProjectedPair]:
        pair = self.projector(seq_s, mask_s, seq_t, mask_t)
        p_inc = self.classify(pair)
        return p_inc, pair

    def classify(self, pair: ProjectedPair) -> torch.Tensor:
        joint = torch.cat([pair.pooled_s, pair.pooled_t], dim=-1)
        z = self.norm(nn.functional.gelu(self.fc1(joint)))
        logit = self.fc2(self.dropout(z)).squeeze(-1)
        return torch.sigmoid(logit)


class CrossModalBlock(nn.Module):
    """Residual self- plus cross-attention per modality, then residual FFN,
    each followed by LayerNorm. Lengths are preserved per modality."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        d = cfg.d_proj
        self.self_s = MultiHeadAttention(d, cfg.n_heads)
        self.self_t = MultiHeadAttention(d, cfg.n_heads)
        self.cross_s = MultiHeadAttention(d, cfg.n_heads)   # queries: speech
        self.cross_t = MultiHeadAttention(d, cfg.n_heads)   # queries: text
        self.norm_s1 = nn.LayerNorm(d)
        self.norm_t1 = nn.LayerNorm(d)
        self.ffn_s = FeedForward(d, dropout=cfg.dropout, activation=nn.GELU)
        self.ffn_t = FeedForward(d, dropout=cfg.dropout, activation=nn.GELU)
        self.norm_s2 = nn.LayerNorm(d)
        self.norm_t2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, s, mask_s, t, mask_t):
        fs = self.norm_s1(s + self.dropout(self.self_s(s, s, mask_s))
                          + self.dropout(self.cross_s(s, t, mask_t)))
        ft = self.norm_t1(t + self.dropout(self.self_t(t, t, mask_t))
                          + self.dropout(self.cross_t(t, s, mask_s)))
        fs = self.norm_s2(self.dropout(self.ffn_s(fs)) + fs) * mask_s[..., None]
        ft = self.norm_t2(self.dropout(self.ffn_t(ft)) + ft) * mask_t[..., None]
        return fs, ft


class GatedFusion(nn.Module):
    """Pool each modality, softmax two scalar gate logits, combine.

    g_s + g_t = 1 by construction; with `gated=False` both gates are fixed
    at 0.5 (ablation).
    """

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.gated = cfg.gated
        self.pool_s = AttentiveStatsPool(cfg.d_proj, cfg.d_proj)
        self.pool_t = AttentiveStatsPool(cfg.d_proj, cfg.d_proj)
        self.gate_s = nn.Linear(cfg.d_proj, 1, bias=False)
        self.gate_t = nn.Linear(cfg.d_proj, 1, bias=False)

    def forward(self, fs, mask_s, ft, mask_t
                ) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        pooled_s = self.pool_s(fs, mask_s)
        pooled_t = self.pool_t(ft, mask_t)
        if self.gated:
            logits = torch.cat([self.gate_s(pooled_s), self.gate_t(pooled_t)], dim=-1)
            gates = torch.softmax(logits, dim=-1)
        else:
            gates = torch.full(
                (pooled_s.shape[0], 2), 0.5, dtype=pooled_s.dtype, device=pooled_s.device
            )
        g_s, g_t = gates[..., 0], gates[..., 1]
        h_f = g_s[..., None] * pooled_s + g_t[..., None] * pooled_t
        return h_f, (g_s, g_t)


class FusionTower(nn.Module):
    """Projection, optional cross-modal block, gated combination, head."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.projector = PairProjector(cfg)
        self.cross = CrossModalBlock(cfg) if cfg.crossmodal_block else None
        self.gate = GatedFusion(cfg)
        self.head = HeteroscedasticHead(cfg.d_proj)

    def forward(self, seq_s, mask_s, seq_t, mask_t):
        """Returns (mu, log_var, (g_s, g_t))."""
        pair = self.projector(seq_s, mask_s, seq_t, mask_t)
        fs, ft = pair.s, pair.t
        if self.cross is not None:
            fs, ft = self.cross(fs, pair.mask_s, ft, pair.mask_t)
        h_f, gates = self.gate(fs, pair.mask_s, ft, pair.mask_t)
        mu, log_var = self.head(h_f)
        return mu, log_var, gates


def decide(p_inc: float, tau: float) -> str:
    """Gate decision; ties break toward detection (inconsistent)."""
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    return "inconsistent" if p_inc >= tau else "consistent"
