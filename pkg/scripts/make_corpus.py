#!/usr/bin/env python3
"""Generate the bundled byte-level corpus.

Deterministic template English: enough structure for a tiny model to learn,
enough variety that pruning visibly hurts and calibration visibly helps.
Writes train.txt and heldout.txt (same grammar, disjoint seeds) into
src/olica/data/.
"""

import argparse
import random
from pathlib import Path

SUBJECTS = [
    "the engineer", "a quiet librarian", "the night watchman", "our neighbor",
    "the old gardener", "a young violinist", "the ferry captain", "the baker",
    "my sister", "the cartographer", "a patient teacher", "the lighthouse keeper",
    "the carpenter", "an amateur astronomer", "the postman", "her grandfather",
]

VERBS = [
    "watched", "repaired", "described", "remembered", "sketched", "measured",
    "collected", "followed", "counted", "recorded", "studied", "arranged",
    "carried", "borrowed", "inspected", "photographed",
]

OBJECTS = [
    "the wooden bridge", "a copper kettle", "the tide tables", "an old map",
    "the broken clock", "a row of poplars", "the harbor lights", "a stack of letters",
    "the weather vane", "a basket of apples", "the train schedule", "a field of barley",
    "the river stones", "a pair of binoculars", "the garden wall", "an empty notebook",
]

PLACES = [
    "near the station", "behind the mill", "along the coast road", "in the market square",
    "by the north gate", "under the oak tree", "across the valley", "on the upper floor",
    "beside the canal", "at the edge of town", "in the reading room", "over the hill",
]

TIMES = [
    "before dawn", "after the storm", "late in autumn", "on sunday morning",
    "during the festival", "at low tide", "in the early frost", "through the long summer",
    "by lamplight", "in the first week of march",
]

WEATHER = [
    "the rain kept falling on the slate roofs",
    "a cold wind moved through the empty streets",
    "fog settled over the river before noon",
    "the afternoon stayed bright and still",
    "clouds gathered slowly above the harbor",
    "snow dusted the fences and the fields",
]

CONNECTIVES = ["meanwhile", "later that day", "the next morning", "by evening", "soon after"]

TEMPLATES = [
    "{subject} {verb} {object} {place} {time}.",
    "{subject} {verb} {object} {time}.",
    "{time}, {subject} {verb} {object} {place}.",
    "{connective}, {subject} {verb} {object}.",
    "{weather}, and {subject} {verb} {object} {place}.",
    "{subject} {verb} {object}, then {verb2} {object2} {place}.",
]


def sentence(rng: random.Random) -> str:
    t = rng.choice(TEMPLATES)
    s = t.format(
        subject=rng.choice(SUBJECTS),
        verb=rng.choice(VERBS),
        verb2=rng.choice(VERBS),
        object=rng.choice(OBJECTS),
        object2=rng.choice(OBJECTS),
        place=rng.choice(PLACES),
        time=rng.choice(TIMES),
        weather=rng.choice(WEATHER),
        connective=rng.choice(CONNECTIVES),
    )
    return s[0].upper() + s[1:]


def paragraph(rng: random.Random) -> str:
    return " ".join(sentence(rng) for _ in range(rng.randint(3, 7)))


def corpus(seed: int, target_bytes: int) -> str:
    rng = random.Random(seed)
    parts = []
    size = 0
    while size < target_bytes:
        p = paragraph(rng)
        parts.append(p)
        size += len(p) + 2
    return "\n\n".join(parts) + "\n"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", default=str(Path(__file__).resolve().parents[1] / "src/olica/data"))
    ap.add_argument("--train-bytes", type=int, default=400_000)
    ap.add_argument("--heldout-bytes", type=int, default=64_000)
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.txt").write_text(corpus(1234, args.train_bytes), encoding="utf-8")
    (out / "heldout.txt").write_text(corpus(9999, args.heldout_bytes), encoding="utf-8")
    print("wrote", out / "train.txt", "and", out / "heldout.txt")


if __name__ == "__main__":
    main()
