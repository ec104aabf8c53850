"""Unimodal towers: speech (toy acoustic encoder + prosody injection +
Conformer + attentive stats pooling) and text (toy token encoder + lexicon
prior FiLM gating + attentive stats pooling), each ending in a
heteroscedastic head that emits per-dimension means and log-variances.

The toy encoders stand in for large pretrained backbones; everything
downstream of them is the real machinery. A precomputed-feature adapter
(`load_precomputed_features`) lets externally extracted embeddings replace the
toy speech encoder without touching the rest of the tower.

Mask discipline: every sequence op either masks its keys (attention), zeroes
masked positions before mixing across time (depthwise conv), or pools over
valid frames only — perturbing a masked frame can never change any output at
a valid frame.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .lexicon import TokenPriorSequence, VadLexicon, priors_for_tokens
from .prosody import (
    DEFAULT_FRAME_MS,
    DEFAULT_HOP_MS,
    ENERGY_FLOOR,
    ProsodyConfig,
    Waveform,
    extract_prosody,
    frame_signal,
)

MIN_VARIANCE = 2e-3
LOG_MIN_VARIANCE = math.log(MIN_VARIANCE)

STD_FLOOR_SQ = 1e-8          # under the sqrt in attentive stats pooling


# ---------------------------------------------------------------------------
# value types

@dataclass(frozen=True)
class VadVector:
    v: float
    a: float
    d: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.a, self.d], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "VadVector":
        arr = np.asarray(arr, dtype=np.float64).reshape(3)
        return cls(float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(frozen=True)
class GaussianVad:
    """Per-dimension mean and log-variance of a VAD prediction."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        lv = np.asarray(self.log_var, dtype=np.float64).reshape(3)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", lv)
        if not (np.isfinite(mu).all() and np.isfinite(lv).all()):
            raise ValueError("GaussianVad fields must be finite")
        if np.any(np.exp(lv) < MIN_VARIANCE * (1.0 - 1e-9)):
            raise ValueError(f"variance below the {MIN_VARIANCE} floor: {np.exp(lv)}")

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_var)

    @classmethod
    def from_tensors(cls, mu: torch.Tensor, log_var: torch.Tensor) -> "GaussianVad":
        return cls(mu.detach().cpu().numpy(), log_var.detach().cpu().numpy())


@dataclass
class FeatureSequence:
    """T x D frames plus a validity mask (True = valid)."""

    frames: torch.Tensor
    mask: torch.Tensor | None = None

    def __post_init__(self):
        if not isinstance(self.frames, torch.Tensor):
            self.frames = torch.as_tensor(np.asarray(self.frames), dtype=torch.float32)
        if self.frames.dim() != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be a (T>=1, D) matrix, got {tuple(self.frames.shape)}")
        if self.mask is None:
            self.mask = torch.ones(self.frames.shape[0], dtype=torch.bool)
        else:
            self.mask = torch.as_tensor(self.mask, dtype=torch.bool)
            if self.mask.shape != (self.frames.shape[0],):
                raise ValueError("mask length must equal frame count")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def width(self) -> int:
        return self.frames.shape[1]


def pad_batch(seqs: list[FeatureSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Collate variable-length sequences into (B, Tmax, D) + (B, Tmax) mask."""
    t_max = max(len(s) for s in seqs)
    width = seqs[0].width
    dtype = seqs[0].frames.dtype
    frames = torch.zeros(len(seqs), t_max, width, dtype=dtype)
    mask = torch.zeros(len(seqs), t_max, dtype=torch.bool)
    for i, s in enumerate(seqs):
        frames[i, : len(s)] = s.frames
        mask[i, : len(s)] = s.mask
    return frames, mask


@dataclass(frozen=True)
class TowerConfig:
    d_model: int = 256
    n_conformer: int = 2
    n_heads: int = 4
    conv_kernel: int = 15
    dropout: float = 0.1
    prosody_injection: bool = True
    film_gating: bool = True
    aspool: bool = True
    n_mels: int = 40
    vocab_size: int = 4096
    n_text_layers: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.conv_kernel % 2 != 1:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")


# ---------------------------------------------------------------------------
# building blocks

def _masked_softmax(scores: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
    # key_mask: (B, Tk) -> broadcast over heads and query positions
    scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    return torch.softmax(scores, dim=-1)


class MultiHeadAttention(nn.Module):
    """Shared self/cross attention with key masking."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, query: torch.Tensor, kv: torch.Tensor,
                kv_mask: torch.Tensor) -> torch.Tensor:
        b, tq, _ = query.shape
        tk = kv.shape[1]

        def split(x, t):
            return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

        q = split(self.q_proj(query), tq)
        k = split(self.k_proj(kv), tk)
        v = split(self.v_proj(kv), tk)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        attn = _masked_softmax(scores, kv_mask)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, -1)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, mult: int = 4, dropout: float = 0.0,
                 activation: type[nn.Module] = nn.SiLU):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, mult * d_model),
            activation(),
            nn.Dropout(dropout),
            nn.Linear(mult * d_model, d_model),
        )

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    """Conformer convolution module; LayerNorm instead of BatchNorm so masked
    frames cannot leak into batch statistics."""

    def __init__(self, d_model: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.pointwise_in = nn.Linear(d_model, 2 * d_model)
        self.depthwise = nn.Conv1d(d_model, d_model, kernel, padding=kernel // 2,
                                   groups=d_model)
        self.mid_norm = nn.LayerNorm(d_model)
        self.pointwise_out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        y = self.norm(x)
        y = nn.functional.glu(self.pointwise_in(y), dim=-1)
        y = y * mask[..., None]                      # no masked taps in the conv
        y = self.depthwise(y.transpose(1, 2)).transpose(1, 2)
        y = nn.functional.silu(self.mid_norm(y))
        return self.dropout(self.pointwise_out(y))


class ConformerBlock(nn.Module):
    """Macaron block: half FFN, masked self-attention, masked depthwise
    convolution, half FFN, final LayerNorm."""

    def __init__(self, d_model: int, n_heads: int, conv_kernel: int, dropout: float):
        super().__init__()
        self.ffn1 = FeedForward(d_model, dropout=dropout)
        self.norm_ffn1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm_attn = nn.LayerNorm(d_model)
        self.conv = ConvModule(d_model, conv_kernel, dropout)
        self.ffn2 = FeedForward(d_model, dropout=dropout)
        self.norm_ffn2 = nn.LayerNorm(d_model)
        self.final_norm = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + 0.5 * self.dropout(self.ffn1(self.norm_ffn1(x)))
        y = self.norm_attn(x)
        x = x + self.dropout(self.attn(y, y, mask))
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.dropout(self.ffn2(self.norm_ffn2(x)))
        x = self.final_norm(x)
        return x * mask[..., None]


class Film(nn.Module):
    """Feature-wise linear modulation from 3-dim prior vectors."""

    def __init__(self, d_model: int, d_cond: int = 3):
        super().__init__()
        self.gamma = nn.Linear(d_cond, d_model)
        self.delta = nn.Linear(d_cond, d_model)

    def forward(self, x: torch.Tensor, priors: torch.Tensor) -> torch.Tensor:
        if priors.shape[-2] != x.shape[-2]:
            raise ValueError(
                f"prior length {priors.shape[-2]} != sequence length {x.shape[-2]}"
            )
        return (1.0 + self.gamma(priors)) * x + self.delta(priors)


class AttentiveStatsPool(nn.Module):
    """Scalar attention per valid frame, weighted mean + std, linear projection."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.scorer = nn.Sequential(nn.Linear(d_in, d_in), nn.Tanh(), nn.Linear(d_in, 1))
        self.proj = nn.Linear(2 * d_in, d_out)

    def stats(self, x: torch.Tensor, mask: torch.Tensor
              ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if not bool(mask.any(dim=1).all()):
            raise ValueError("attentive pooling needs at least one valid frame per sequence")
        logits = self.scorer(x).squeeze(-1)
        logits = logits.masked_fill(~mask, float("-inf"))
        w = torch.softmax(logits, dim=1)
        mean = (w[..., None] * x).sum(dim=1)
        sq_mean = (w[..., None] * x * x).sum(dim=1)
        std = torch.sqrt(torch.clamp(sq_mean - mean ** 2, min=STD_FLOOR_SQ))
        return mean, std, w

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        mean, std, _ = self.stats(x, mask)
        return self.proj(torch.cat([mean, std], dim=-1))


class MeanPool(nn.Module):
    """Masked mean pooling fallback (pooling ablation)."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.proj = nn.Linear(d_in, d_out)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if not bool(mask.any(dim=1).all()):
            raise ValueError("mean pooling needs at least one valid frame per sequence")
        m = mask[..., None].to(x.dtype)
        mean = (x * m).sum(dim=1) / m.sum(dim=1)
        return self.proj(mean)


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask[..., None].to(x.dtype)
    return (x * m).sum(dim=1) / torch.clamp(m.sum(dim=1), min=1.0)


class HeteroscedasticHead(nn.Module):
    """Hidden layer + two width-3 branches for mu and floored log-variance.

    The floor is a hard max in variance space: log_var = max(raw, log(2e-3)),
    with zero gradient where it binds.
    """

    def __init__(self, d_in: int):
        super().__init__()
        self.hidden = nn.Linear(d_in, d_in)
        self.mu_out = nn.Linear(d_in, 3)
        self.log_var_out = nn.Linear(d_in, 3)

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = nn.functional.gelu(self.hidden(h))
        mu = self.mu_out(z)
        log_var = torch.clamp(self.log_var_out(z), min=LOG_MIN_VARIANCE)
        return mu, log_var


# ---------------------------------------------------------------------------
# acoustic front end

def mel_filterbank(n_mels: int, n_fft: int, fs: int) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1)."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(fs / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bins = np.floor((n_fft + 1) * hz_pts / fs).astype(int)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for i in range(n_mels):
        left, center, right = bins[i], bins[i + 1], bins[i + 2]
        center = max(center, left + 1)
        right = max(right, center + 1)
        for k in range(left, center):
            fb[i, k] = (k - left) / (center - left)
        for k in range(center, min(right, fb.shape[1])):
            fb[i, k] = (right - k) / (right - center)
    return fb


def log_mel_features(w: Waveform, n_mels: int = 40,
                     frame_ms: float = DEFAULT_FRAME_MS,
                     hop_ms: float = DEFAULT_HOP_MS) -> np.ndarray:
    """Log-mel filterbank frames, shape (T, n_mels); framing matches prosody."""
    frames = frame_signal(w, frame_ms, hop_ms)
    window = np.hanning(frames.shape[1])
    spec = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    fb = mel_filterbank(n_mels, frames.shape[1], w.sample_rate_hz)
    return np.log(ENERGY_FLOOR + spec @ fb.T)


class ToySpeechEncoder(nn.Module):
    """Log-mel front end + one trainable linear layer to d_model."""

    def __init__(self, cfg: TowerConfig):
        super().__init__()
        self.n_mels = cfg.n_mels
        self.linear = nn.Linear(cfg.n_mels, cfg.d_model)

    def features(self, w: Waveform) -> FeatureSequence:
        return FeatureSequence(torch.from_numpy(
            log_mel_features(w, self.n_mels).astype(np.float32)))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return self.linear(mel)


# ---------------------------------------------------------------------------
# precomputed-feature adapter

def save_precomputed_features(dir_path, records: dict[str, np.ndarray]) -> None:
    """Write a feature archive: raw LE fp32 matrices + `id T D` manifest lines."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    with open(dir_path / "features.manifest", "w", encoding="utf-8") as fh:
        for utt_id, mat in records.items():
            mat = np.ascontiguousarray(mat, dtype="<f4")
            fh.write(f"{utt_id} {mat.shape[0]} {mat.shape[1]}\n")
            mat.tofile(dir_path / f"{utt_id}.f32")


def load_precomputed_features(dir_path, utt_id: str,
                              expected_width: int | None = None) -> FeatureSequence:
    """Load a stored T x D matrix for one utterance, all-true mask."""
    dir_path = Path(dir_path)
    manifest = dir_path / "features.manifest"
    if not manifest.exists():
        raise FileNotFoundError(f"feature manifest not found: {manifest}")
    shape = None
    with open(manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts and parts[0] == utt_id:
                shape = (int(parts[1]), int(parts[2]))
                break
    if shape is None:
        raise KeyError(f"utterance id {utt_id!r} not in {manifest}")
    if expected_width is not None and shape[1] != expected_width:
        raise ValueError(
            f"feature width {shape[1]} does not match configured width {expected_width}"
        )
    mat = np.fromfile(dir_path / f"{utt_id}.f32", dtype="<f4").reshape(shape)
    return FeatureSequence(torch.from_numpy(mat.copy()))


# ---------------------------------------------------------------------------
# token front end

def token_to_id(token: str, vocab_size: int) -> int:
    digest = hashlib.md5(token.lower().encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % vocab_size


def tokens_to_ids(tokens, vocab_size: int) -> torch.Tensor:
    return torch.tensor([token_to_id(t, vocab_size) for t in tokens], dtype=torch.long)


def sinusoidal_positions(t: int, d_model: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(t, dtype=torch.float64)[:, None]
    i = torch.arange(d_model // 2, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, 2.0 * i / d_model)
    enc = torch.zeros(t, d_model, dtype=torch.float64)
    enc[:, 0::2] = torch.sin(angle)
    enc[:, 1::2] = torch.cos(angle)
    return enc.to(dtype)


class TransformerLayer(nn.Module):
    """Plain post-norm encoder layer with masked self-attention."""

    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, dropout=dropout, activation=nn.GELU)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.dropout(self.attn(x, x, mask)))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x * mask[..., None]


class ToyTextEncoder(nn.Module):
    """Hashed trainable embeddings + sinusoidal positions + encoder layers."""

    def __init__(self, cfg: TowerConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.d_model, cfg.n_heads, cfg.dropout)
            for _ in range(cfg.n_text_layers)
        )

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.embed(ids)
        x = x + sinusoidal_positions(ids.shape[1], x.shape[-1], x.dtype).to(x.device)
        x = x * mask[..., None]
        for layer in self.layers:
            x = layer(x, mask)
        return x


# ---------------------------------------------------------------------------
# towers

def _make_pool(cfg: TowerConfig) -> nn.Module:
    if cfg.aspool:
        return AttentiveStatsPool(cfg.d_model, cfg.d_model)
    return MeanPool(cfg.d_model, cfg.d_model)


class SpeechTower(nn.Module):
    """Eq-for-eq speech path: encoder features + prosody, linear injection,
    Conformer stack, pooling, heteroscedastic head."""

    def __init__(self, cfg: TowerConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ToySpeechEncoder(cfg)
        self.inject = nn.Linear(cfg.d_model + 2, cfg.d_model)
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.d_model, cfg.n_heads, cfg.conv_kernel, cfg.dropout)
            for _ in range(cfg.n_conformer)
        )
        self.pool = _make_pool(cfg)
        self.head = HeteroscedasticHead(cfg.d_model)

    def forward(self, mel: torch.Tensor, prosody: torch.Tensor, mask: torch.Tensor,
                precomputed: torch.Tensor | None = None
                ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """mel: (B,T,n_mels), prosody: (B,T,2), mask: (B,T) ->
        (h, mu, log_var, seq) with seq the pre-pooling (B,T,D) output."""
        feats = precomputed if precomputed is not None else self.encoder(mel)
        if not self.cfg.prosody_injection:
            prosody = torch.zeros_like(prosody)
        x = self.inject(torch.cat([feats, prosody], dim=-1))
        x = x * mask[..., None]
        for block in self.blocks:
            x = block(x, mask)
        h = self.pool(x, mask)
        mu, log_var = self.head(h)
        return h, mu, log_var, x

    def forward_waveform(self, w: Waveform
                         ) -> tuple[torch.Tensor, GaussianVad, FeatureSequence]:
        """Single-utterance inference from raw audio."""
        mel, pros = speech_inputs(w, self.cfg)
        mask = torch.ones(1, mel.shape[0], dtype=torch.bool)
        h, mu, lv, seq = self.forward(mel[None], pros[None], mask)
        return h[0], GaussianVad.from_tensors(mu[0], lv[0]), FeatureSequence(seq[0])


def speech_inputs(w: Waveform, cfg: TowerConfig,
                  prosody_cfg: ProsodyConfig = ProsodyConfig()
                  ) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic DSP shared by training and inference: log-mel + prosody,
    time-aligned to the same frame count."""
    mel = log_mel_features(w, cfg.n_mels, prosody_cfg.frame_ms, prosody_cfg.hop_ms)
    pros = extract_prosody(w, prosody_cfg, n_frames=mel.shape[0]).frames
    return (torch.from_numpy(mel.astype(np.float32)),
            torch.from_numpy(pros.astype(np.float32)))


class TextTower(nn.Module):
    """Token encoder, FiLM gating with lexicon priors, pooling, head."""

    def __init__(self, cfg: TowerConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ToyTextEncoder(cfg)
        self.film = Film(cfg.d_model)
        self.pool = _make_pool(cfg)
        self.head = HeteroscedasticHead(cfg.d_model)

    def forward(self, ids: torch.Tensor, priors: torch.Tensor, mask: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """ids: (B,T) long, priors: (B,T,3), mask: (B,T)."""
        x = self.encoder(ids, mask)
        if self.cfg.film_gating:
            x = self.film(x, priors)
            x = x * mask[..., None]
        h = self.pool(x, mask)
        mu, log_var = self.head(h)
        return h, mu, log_var, x

    def forward_tokens(self, tokens: list[str], lex: VadLexicon
                       ) -> tuple[torch.Tensor, GaussianVad, FeatureSequence]:
        if len(tokens) == 0:
            raise ValueError("text tower needs at least one token")
        ids, priors = text_inputs(tokens, self.cfg, lex)
        mask = torch.ones(1, len(tokens), dtype=torch.bool)
        h, mu, lv, seq = self.forward(ids[None], priors[None], mask)
        return h[0], GaussianVad.from_tensors(mu[0], lv[0]), FeatureSequence(seq[0])


def text_inputs(tokens: list[str], cfg: TowerConfig, lex: VadLexicon
                ) -> tuple[torch.Tensor, torch.Tensor]:
    ids = tokens_to_ids(tokens, cfg.vocab_size)
    priors = priors_for_tokens(tokens, lex).priors
    return ids, torch.from_numpy(priors.astype(np.float32))
