"""Token-level VAD priors from a lexicon file.

Lexicon format: tab-separated `term<TAB>v<TAB>a<TAB>d` rows with an optional
`#range lo hi` header giving the value scale (default [0, 1]). Values are
rescaled into [0, 1]^3 on load. Lookup is case-folded; unknown tokens get the
neutral midpoint (0.5, 0.5, 0.5).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

NEUTRAL_PRIOR = (0.5, 0.5, 0.5)

# leading markers various subword tokenizers attach to word continuations
_SUBWORD_MARKERS = ("##", "▁", "Ġ")


class LexiconParseError(ValueError):
    """Malformed lexicon file; message carries the offending line number."""


@dataclass(frozen=True)
class VadLexicon:
    entries: dict[str, tuple[float, float, float]]
    declared_range: tuple[float, float] = (0.0, 1.0)
    n_duplicates: int = 0

    def __post_init__(self):
        if not self.entries:
            raise ValueError("lexicon has no entries")

    def __len__(self):
        return len(self.entries)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.entries

    def lookup(self, word: str) -> tuple[float, float, float] | None:
        return self.entries.get(word.lower())


@dataclass(frozen=True)
class TokenPriorSequence:
    priors: np.ndarray           # (T, 3) in [0, 1]
    coverage: float              # fraction of tokens found in the lexicon

    def __len__(self):
        return self.priors.shape[0]


def load_lexicon(path) -> VadLexicon:
    """Parse a lexicon TSV; duplicate terms keep the last row (counted)."""
    entries: dict[str, tuple[float, float, float]] = {}
    lo, hi = 0.0, 1.0
    n_dup = 0
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "range":
                if len(parts) != 3:
                    raise LexiconParseError(f"{path}:{lineno}: bad range header {line!r}")
                try:
                    lo, hi = float(parts[1]), float(parts[2])
                except ValueError as exc:
                    raise LexiconParseError(f"{path}:{lineno}: bad range header {line!r}") from exc
                if not hi > lo:
                    raise LexiconParseError(f"{path}:{lineno}: range needs hi > lo")
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise LexiconParseError(
                f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}"
            )
        term = fields[0].strip().lower()
        if not term:
            raise LexiconParseError(f"{path}:{lineno}: empty term")
        try:
            vals = [float(f) for f in fields[1:]]
        except ValueError as exc:
            raise LexiconParseError(f"{path}:{lineno}: non-numeric VAD value in {line!r}") from exc
        span = hi - lo
        scaled = []
        for x in vals:
            if not (lo <= x <= hi):
                raise LexiconParseError(
                    f"{path}:{lineno}: value {x} outside declared range [{lo}, {hi}]"
                )
            scaled.append((x - lo) / span)
        if term in entries:
            n_dup += 1
        entries[term] = tuple(scaled)
    if not entries:
        raise LexiconParseError(f"{path}: no lexicon entries found")
    if n_dup:
        warnings.warn(f"{path}: {n_dup} duplicate term(s), last occurrence kept")
    return VadLexicon(entries=entries, declared_range=(lo, hi), n_duplicates=n_dup)


def strip_subword_marker(token: str) -> str:
    for marker in _SUBWORD_MARKERS:
        if token.startswith(marker) and len(token) > len(marker):
            return token[len(marker):]
    return token


def priors_for_tokens(tokens, lex: VadLexicon,
                      words: list[str] | None = None) -> TokenPriorSequence:
    """Per-token prior lookup; OOV tokens get the neutral midpoint.

    `words`, when given, maps each token to the whole word it came from
    (tokenizer word alignment); subword pieces then inherit the word's triple.
    """
    tokens = list(tokens)
    if words is not None and len(words) != len(tokens):
        raise ValueError(f"words alignment length {len(words)} != token count {len(tokens)}")
    if not tokens:
        return TokenPriorSequence(priors=np.zeros((0, 3)), coverage=0.0)
    priors = np.empty((len(tokens), 3))
    hits = 0
    for i, tok in enumerate(tokens):
        key = words[i] if words is not None else strip_subword_marker(tok)
        triple = lex.lookup(key)
        if triple is None:
            priors[i] = NEUTRAL_PRIOR
        else:
            priors[i] = triple
            hits += 1
    return TokenPriorSequence(priors=priors, coverage=hits / len(tokens))


def toy_lexicon_path():
    """Path of the bundled ~200-word lexicon used by tests and synthetic data."""
    return resources.files("vadfusion").joinpath("data/toy_lexicon.tsv")


def load_toy_lexicon() -> VadLexicon:
    return load_lexicon(toy_lexicon_path())
