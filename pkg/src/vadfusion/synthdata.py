"""Synthetic multimodal corpus with controllable difficulty.

Every utterance gets a latent VAD triple z. The speech side is synthesized
audio whose pitch mean encodes arousal, pitch variance encodes dominance, and
energy encodes valence (all monotonically), plus white noise at a configured
SNR. The text side samples lexicon words whose triples concentrate around z,
plus distractors. Splits are speaker-independent (8/1/1 by speaker).

Inconsistent pairs are manufactured afterwards by swapping the text side of a
non-neutral utterance for tokens generated from a neutral latent (y=0);
untouched pairs keep y=1 and their labels.

The generator also writes a private `latents_*.tsv` sidecar with the hidden z
values per side, used only by oracle tests — never by the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .lexicon import VadLexicon, load_toy_lexicon
from .prosody import Waveform, save_wav
from .towers import VadVector

NEUTRAL_CENTER = 0.5

OOV_FILLERS = ["the", "and", "of", "to", "it", "was", "a"]


@dataclass(frozen=True)
class SynthConfig:
    n_utterances: int = 2500
    speakers: int = 10
    snr: float = 10.0                  # dB; math.inf turns noise off
    neutral_radius: float = 0.1
    emotion_offset_min: float = 0.3
    seed: int = 0
    sample_rate: int = 16000
    n_content_words: int = 6
    n_distractors: int = 2

    def __post_init__(self):
        if self.emotion_offset_min <= self.neutral_radius:
            raise ValueError(
                f"emotion_offset_min ({self.emotion_offset_min}) must exceed "
                f"neutral_radius ({self.neutral_radius})"
            )
        if self.n_utterances < 1 or self.speakers < 3:
            raise ValueError("need n_utterances >= 1 and speakers >= 3")


@dataclass
class PairRecord:
    id: str
    split: str
    speaker: str
    speech_ref: str
    tokens: list[str]
    vad: VadVector | None = None
    consistency: int | None = None


def write_manifest(records: list[PairRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            if r.vad is None:
                v = a = d = "-"
            else:
                v, a, d = (f"{x:.6f}" for x in (r.vad.v, r.vad.a, r.vad.d))
            y = "-" if r.consistency is None else str(r.consistency)
            fh.write("\t".join([r.id, r.split, r.speaker, r.speech_ref,
                                " ".join(r.tokens), v, a, d, y]) + "\n")


def read_manifest(path) -> list[PairRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 9:
                raise ValueError(f"{path}:{lineno}: expected 9 fields, got {len(fields)}")
            rid, split, speaker, wav, tokens, v, a, d, y = fields
            vad = None if v == "-" else VadVector(float(v), float(a), float(d))
            consistency = None if y == "-" else int(y)
            records.append(PairRecord(rid, split, speaker, wav, tokens.split(),
                                      vad, consistency))
    return records


def write_latents(rows: list[tuple], path) -> None:
    """Private sidecar: id, speaker, speech z, text z."""
    with open(path, "w", encoding="utf-8") as fh:
        for rid, speaker, zs, zt in rows:
            fh.write("\t".join([rid, speaker]
                               + [f"{x:.6f}" for x in zs]
                               + [f"{x:.6f}" for x in zt]) + "\n")


def read_latents(path) -> dict[str, dict]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            out[parts[0]] = {
                "speaker": parts[1],
                "z_speech": np.array([float(x) for x in parts[2:5]]),
                "z_text": np.array([float(x) for x in parts[5:8]]),
            }
    return out


def synth_waveform(z: np.ndarray, cfg: SynthConfig, rng: np.random.Generator,
                   f0_offset: float = 0.0) -> Waveform:
    """Tone whose prosody encodes z = (v, a, d): amplitude from valence, mean
    f0 from arousal, f0 modulation depth (pitch variance) from dominance."""
    v, a, d = z
    fs = cfg.sample_rate
    seconds = rng.uniform(0.8, 1.2)
    n = int(seconds * fs)
    t = np.arange(n) / fs
    f0_mean = 120.0 + 200.0 * a + f0_offset
    dev = 2.0 + 50.0 * d
    f_mod = rng.uniform(2.5, 6.0)
    phase0 = rng.uniform(0.0, 2.0 * math.pi)
    f0 = f0_mean + dev * np.sin(2.0 * math.pi * f_mod * t + phase0)
    phase = 2.0 * math.pi * np.cumsum(f0) / fs
    amp = 0.05 + 0.7 * v
    x = amp * np.sin(phase)
    if math.isfinite(cfg.snr):
        signal_power = amp ** 2 / 2.0
        noise_power = signal_power / (10.0 ** (cfg.snr / 10.0))
        x = x + rng.normal(0.0, math.sqrt(noise_power), size=n)
    return Waveform(np.clip(x, -1.0, 1.0), fs)


def sample_tokens(z: np.ndarray, lex: VadLexicon, cfg: SynthConfig,
                  rng: np.random.Generator, spread: float = 0.15) -> list[str]:
    """Content words concentrated around z, plus distractors and one filler."""
    words = list(lex.entries.keys())
    triples = np.array([lex.entries[w] for w in words])
    d2 = np.sum((triples - z) ** 2, axis=1)
    weights = np.exp(-d2 / (2.0 * spread ** 2))
    weights /= weights.sum()
    n_content = int(rng.integers(cfg.n_content_words - 1, cfg.n_content_words + 2))
    content = [words[i] for i in rng.choice(len(words), size=n_content,
                                            replace=False, p=weights)]
    distract = [words[i] for i in rng.choice(len(words), size=cfg.n_distractors,
                                             replace=False)]
    filler = [OOV_FILLERS[int(rng.integers(len(OOV_FILLERS)))]]
    tokens = content + distract + filler
    rng.shuffle(tokens)
    return tokens


def _speaker_splits(cfg: SynthConfig, rng: np.random.Generator) -> dict[str, str]:
    names = [f"spk{i:02d}" for i in range(cfg.speakers)]
    order = list(rng.permutation(cfg.speakers))
    n_val = max(1, round(0.1 * cfg.speakers))
    n_test = max(1, round(0.1 * cfg.speakers))
    assignment = {}
    for rank, idx in enumerate(order):
        if rank < n_val:
            assignment[names[idx]] = "val"
        elif rank < n_val + n_test:
            assignment[names[idx]] = "test"
        else:
            assignment[names[idx]] = "train"
    return assignment


def gen_corpus(cfg: SynthConfig, out_dir, lex: VadLexicon | None = None
               ) -> dict[str, Path]:
    """Generate wavs, per-split manifests, and the private latent sidecars.

    Returns {"train": manifest_path, "val": ..., "test": ...}.
    """
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    lex = lex or load_toy_lexicon()
    rng = np.random.default_rng(cfg.seed)

    split_of = _speaker_splits(cfg, rng)
    speakers = sorted(split_of)
    f0_offsets = {spk: float(rng.uniform(-15.0, 15.0)) for spk in speakers}

    words = list(lex.entries.keys())
    triples = np.array([lex.entries[w] for w in words])
    # bias toward non-neutral seed words so the eligible pool for
    # inconsistent-pair construction stays comfortably above typical fractions
    seed_weights = 0.15 + np.max(np.abs(triples - NEUTRAL_CENTER), axis=1)
    seed_weights /= seed_weights.sum()

    records: dict[str, list[PairRecord]] = {"train": [], "val": [], "test": []}
    latents: dict[str, list[tuple]] = {"train": [], "val": [], "test": []}
    for i in range(cfg.n_utterances):
        speaker = speakers[i % len(speakers)]
        split = split_of[speaker]
        seed_word = int(rng.choice(len(words), p=seed_weights))
        z = np.clip(triples[seed_word] + rng.normal(0.0, 0.06, size=3), 0.02, 0.98)
        rid = f"utt{i:05d}"
        wav = synth_waveform(z, cfg, rng, f0_offsets[speaker])
        save_wav(wav_dir / f"{rid}.wav", wav)
        tokens = sample_tokens(z, lex, cfg, rng)
        records[split].append(PairRecord(
            id=rid, split=split, speaker=speaker, speech_ref=f"wav/{rid}.wav",
            tokens=tokens, vad=VadVector.from_array(z), consistency=1,
        ))
        latents[split].append((rid, speaker, z, z))

    paths = {}
    for split in ("train", "val", "test"):
        manifest = out_dir / f"manifest_{split}.tsv"
        write_manifest(records[split], manifest)
        write_latents(latents[split], out_dir / f"latents_{split}.tsv")
        paths[split] = manifest
    return paths


def make_inconsistent_pairs(corpus_dir, split: str, fraction: float,
                            cfg: SynthConfig, lex: VadLexicon | None = None
                            ) -> Path:
    """Convert a deterministic fraction of a split into inconsistent pairs.

    Converted records keep their (non-neutral) speech but get tokens drawn
    around a neutral latent; their consistency label flips to 0 and the VAD
    label is dropped. Writes pairs_<split>.tsv plus its latent sidecar.
    """
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    corpus_dir = Path(corpus_dir)
    lex = lex or load_toy_lexicon()
    records = read_manifest(corpus_dir / f"manifest_{split}.tsv")
    latents = read_latents(corpus_dir / f"latents_{split}.tsv")
    split_salt = {"train": 1, "val": 2, "test": 3}.get(split, 4)
    rng = np.random.default_rng(cfg.seed + 7919 * split_salt)

    eligible = [
        r.id for r in records
        if np.max(np.abs(latents[r.id]["z_speech"] - NEUTRAL_CENTER))
        >= cfg.emotion_offset_min
    ]
    n_convert = round(fraction * len(records))
    if n_convert > len(eligible):
        raise ValueError(
            f"cannot convert {n_convert} pairs: only {len(eligible)} have "
            f"speech latents at least {cfg.emotion_offset_min} from neutral"
        )
    order = rng.permutation(len(eligible))
    convert = {eligible[i] for i in order[:n_convert]}

    out_records, out_latents = [], []
    for r in records:
        z_speech = latents[r.id]["z_speech"]
        if r.id in convert:
            z_text = NEUTRAL_CENTER + rng.uniform(-cfg.neutral_radius,
                                                  cfg.neutral_radius, size=3)
            tokens = sample_tokens(z_text, lex, cfg, rng)
            out_records.append(replace(r, tokens=tokens, vad=None, consistency=0))
            out_latents.append((r.id, r.speaker, z_speech, z_text))
        else:
            out_records.append(replace(r, consistency=1))
            out_latents.append((r.id, r.speaker, z_speech, latents[r.id]["z_text"]))

    pairs_path = corpus_dir / f"pairs_{split}.tsv"
    write_manifest(out_records, pairs_path)
    write_latents(out_latents, corpus_dir / f"pairs_latents_{split}.tsv")
    return pairs_path


def make_fusion_manifest(pairs_manifest, labeled_fraction: float, seed: int) -> Path:
    """Keep only consistent pairs; blank the VAD label on a deterministic
    fraction so the agreement objective has unlabeled samples to act on."""
    pairs_manifest = Path(pairs_manifest)
    records = [r for r in read_manifest(pairs_manifest) if r.consistency == 1]
    if not records:
        raise ValueError(f"{pairs_manifest}: no consistent pairs to train fusion on")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_unlabeled = int(round((1.0 - labeled_fraction) * len(records)))
    unlabeled = set(order[:n_unlabeled].tolist())
    out = [replace(r, vad=None) if i in unlabeled else r
           for i, r in enumerate(records)]
    path = pairs_manifest.with_name(pairs_manifest.stem.replace("pairs", "fusion")
                                    + pairs_manifest.suffix)
    write_manifest(out, path)
    return path
