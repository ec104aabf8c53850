#!/usr/bin/env python3
"""Regenerate src/vadfusion/data/toy_lexicon.tsv.

Words are grouped by rough affect category; each word gets its category
anchor plus a small deterministic jitter so the 200-odd triples spread over
the VAD cube instead of collapsing onto a handful of points.
"""

import hashlib
import pathlib

CATEGORIES = {
    (0.90, 0.80, 0.70): """happy joyful delighted excited thrilled ecstatic elated cheerful
        jubilant overjoyed gleeful euphoric""",
    (0.80, 0.25, 0.55): """calm peaceful relaxed serene content tranquil cozy soothed restful
        mellow""",
    (0.85, 0.50, 0.60): """love adore cherish warm tender fond caring devoted""",
    (0.75, 0.60, 0.85): """proud confident strong powerful bold mighty commanding triumphant
        victorious dominant assertive fearless""",
    (0.12, 0.85, 0.75): """angry furious enraged outraged irate livid hostile aggressive
        seething wrathful""",
    (0.25, 0.60, 0.60): """annoyed irritated frustrated bitter grumpy cranky resentful""",
    (0.15, 0.80, 0.20): """afraid scared terrified panicked horrified frightened alarmed
        petrified""",
    (0.25, 0.70, 0.25): """anxious nervous worried tense uneasy stressed jittery apprehensive""",
    (0.12, 0.30, 0.25): """sad miserable depressed gloomy heartbroken sorrowful mournful
        grieving despairing dejected""",
    (0.20, 0.35, 0.20): """lonely abandoned isolated helpless hopeless forlorn""",
    (0.35, 0.30, 0.12): """meek timid shy submissive weak powerless obedient docile passive
        humble""",
    (0.10, 0.55, 0.45): """disgusted revolted nauseated repulsed sickened appalled""",
    (0.35, 0.15, 0.35): """bored tired sleepy weary drowsy dull listless sluggish""",
    (0.60, 0.85, 0.45): """surprised astonished amazed startled astounded shocked stunned""",
    (0.70, 0.60, 0.60): """curious interested eager fascinated inspired motivated enthusiastic
        hopeful optimistic""",
    (0.70, 0.30, 0.80): """masterful composed regal stately""",
    (0.25, 0.35, 0.70): """scornful disdainful contemptuous cynical""",
    (0.75, 0.75, 0.30): """giddy giggly tickled awestruck""",
    (0.65, 0.40, 0.55): """pleasant friendly kind gentle polite helpful generous honest""",
    (0.35, 0.45, 0.40): """unpleasant rude cold distant careless messy noisy""",
    (0.50, 0.45, 0.50): """table chair window door paper road morning coffee river stone
        house garden street letter clock bridge market train field village
        city book wall floor lamp bottle glass plate spoon shelf""",
    (0.50, 0.50, 0.50): """walk talk look write read move turn carry bring place stand sit
        wait open close""",
}

JITTER = 0.06


def jitter(word: str, dim: int) -> float:
    digest = hashlib.md5(f"{word}:{dim}".encode()).digest()
    u = int.from_bytes(digest[:4], "little") / 2**32
    return (2.0 * u - 1.0) * JITTER


def main():
    out = pathlib.Path(__file__).resolve().parents[1] / "src/vadfusion/data/toy_lexicon.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for anchor, words in CATEGORIES.items():
        for word in words.split():
            vals = [
                min(0.98, max(0.02, anchor[k] + jitter(word, k)))
                for k in range(3)
            ]
            rows.append((word, *vals))
    rows.sort()
    with out.open("w", encoding="utf-8") as fh:
        fh.write("#range 0 1\n")
        for word, v, a, d in rows:
            fh.write(f"{word}\t{v:.3f}\t{a:.3f}\t{d:.3f}\n")
    print(f"wrote {len(rows)} entries to {out}")


if __name__ == "__main__":
    main()
