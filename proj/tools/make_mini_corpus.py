#!/usr/bin/env python3
"""Writes data/mini_sentiment.txt: short labeled parse trees, 0=negative 1=neutral 2=positive."""
import random
import sys

POS = ["good", "great", "funny", "charming", "moving", "clever", "fresh", "gripping", "lovely", "smart"]
NEG = ["bad", "dull", "boring", "clumsy", "awful", "weak", "tedious", "bland", "messy", "flat"]
NOUNS = ["movie", "film", "plot", "acting", "script", "ending", "cast", "story", "music", "pacing"]
DETS = ["the", "this"]
VERBS = ["was", "is", "felt", "seemed"]


def label(v):
    return {-1: 0, 0: 1, 1: 2}[v]


def leaf(word, v=0):
    return (f"({label(v)} {word})", v)


def node(a, b, v):
    return (f"({label(v)} {a[0]} {b[0]})", v)


def adjective(rng):
    if rng.random() < 0.5:
        return leaf(rng.choice(POS), 1)
    return leaf(rng.choice(NEG), -1)


def adjp(rng):
    r = rng.random()
    a = adjective(rng)
    if r < 0.3:
        return a
    if r < 0.5:
        return node(leaf("very"), a, a[1])
    if r < 0.7:
        return node(leaf("not"), a, -a[1])
    if r < 0.85:
        very = node(leaf("very"), a, a[1])
        return node(leaf("not"), very, -a[1])
    b = adjective(rng)
    conj = node(leaf("and"), b, b[1])
    return node(a, conj, a[1] if a[1] == b[1] else 0)


def sentence(rng):
    subj = node(leaf(rng.choice(DETS)), leaf(rng.choice(NOUNS)), 0)
    pred_adj = adjp(rng)
    pred = node(leaf(rng.choice(VERBS)), pred_adj, pred_adj[1])
    return node(subj, pred, pred[1])


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/mini_sentiment.txt"
    rng = random.Random(2018)
    seen = []
    while len(seen) < 200:
        s = sentence(rng)[0]
        if s not in seen:
            seen.append(s)
    with open(out, "w") as f:
        f.write("# mini sentiment corpus: 0=negative 1=neutral 2=positive, every node labeled\n")
        for s in seen:
            f.write(s + "\n")


if __name__ == "__main__":
    main()
