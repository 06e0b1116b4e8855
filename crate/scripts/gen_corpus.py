#!/usr/bin/env python3
"""Writes the bundled text corpus: plain English-like prose from a small
seeded grammar. Output is byte-identical for a given seed.

    python3 scripts/gen_corpus.py            # writes data/train and data/eval
"""

import argparse
import random
from pathlib import Path

NAMES = ["Anna", "Boris", "Clara", "Daniel", "Elena", "Felix", "Greta", "Hugo",
         "Iris", "Jonas", "Klara", "Lukas", "Mira", "Nils", "Olga", "Paul"]
PLACES = ["the harbor", "the old mill", "the market", "the village square", "the river bank",
          "the north road", "the library", "the orchard", "the lighthouse", "the bakery",
          "the station", "the hill above the town"]
OBJECTS = ["a letter", "a lantern", "a small wooden box", "a map", "an old coin", "a basket of apples",
           "a broken clock", "a red scarf", "a key", "a book of songs", "a fishing net", "a loaf of bread"]
ADJ = ["quiet", "cold", "bright", "narrow", "crowded", "empty", "grey", "warm", "long", "strange"]
TIME = ["In the morning", "At noon", "Late in the evening", "Before dawn", "On the next day",
        "After the rain", "That winter", "Some weeks later", "At dusk", "Early in the spring"]
VERBS_T = ["found", "carried", "lost", "opened", "mended", "sold", "hid", "painted", "bought", "gave away"]
VERBS_M = ["walked to", "ran to", "went back to", "waited at", "looked for work at", "slept near"]
FEEL = ["tired", "happy", "worried", "curious", "angry", "calm", "afraid", "proud"]
SAY = ["said", "asked", "whispered", "answered", "called out"]
LINES = ["We should go home now.", "Have you seen the weather?", "I will not forget this.",
         "Nobody knows the way.", "It is later than you think.", "Come with me to the water.",
         "The bread is still warm.", "Where did you put the key?", "Let us wait one more hour."]


def sentence(r: random.Random, cast: list[str]) -> str:
    a, b = r.sample(cast, 2)
    kind = r.randrange(7)
    if kind == 0:
        return f"{r.choice(TIME)}, {a} {r.choice(VERBS_M)} {r.choice(PLACES)}."
    if kind == 1:
        return f"{a} {r.choice(VERBS_T)} {r.choice(OBJECTS)} and gave it to {b}."
    if kind == 2:
        return f'"{r.choice(LINES)}" {a} {r.choice(SAY)}.'
    if kind == 3:
        return f"The day was {r.choice(ADJ)}, and {a} felt {r.choice(FEEL)}."
    if kind == 4:
        return f"{a} and {b} {r.choice(VERBS_M)} {r.choice(PLACES)}, where the air was {r.choice(ADJ)}."
    if kind == 5:
        return f"When {b} {r.choice(VERBS_T)} {r.choice(OBJECTS)}, {a} was {r.choice(FEEL)}."
    n = r.randrange(2, 40)
    return f"There were {n} people at {r.choice(PLACES)}, but {a} spoke only to {b}."


def document(r: random.Random, target_bytes: int, index: int) -> str:
    cast = r.sample(NAMES, 5)
    parts = [f"Chapter {index + 1}\n\n"]
    size = len(parts[0])
    while size < target_bytes:
        para = " ".join(sentence(r, cast) for _ in range(r.randrange(3, 8))) + "\n\n"
        parts.append(para)
        size += len(para)
    return "".join(parts)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data")
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--docs", type=int, default=9)
    ap.add_argument("--doc-bytes", type=int, default=100_000)
    args = ap.parse_args()

    r = random.Random(args.seed)
    train = args.out / "train"
    held = args.out / "eval"
    train.mkdir(parents=True, exist_ok=True)
    held.mkdir(parents=True, exist_ok=True)
    for i in range(args.docs):
        (train / f"doc_{i:02d}.txt").write_text(document(r, args.doc_bytes, i), encoding="utf-8")
    (held / "held_out.txt").write_text(document(r, args.doc_bytes, args.docs), encoding="utf-8")


if __name__ == "__main__":
    main()
