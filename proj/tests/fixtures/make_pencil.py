#!/usr/bin/env python3
"""Writes pencil.json: a 20-token retrieval example whose perplexity is
computed here, independently of the C++ code.

Keys are multiples of 1/8 in two dimensions so every squared distance is
exact in binary floating point. Base log-probs are rounded to float32 because
the trace format stores them that way.
"""
import json
import math
import struct
from collections import Counter
from pathlib import Path

TEXT = "the cat sat on the mat . the dog sat on the log . a cat saw the dog ."
K = 4
LAMBDA = 0.25


def f32(x):
    return struct.unpack("<f", struct.pack("<f", x))[0]


def main():
    tokens = TEXT.split()
    assert len(tokens) == 20
    counts = Counter(tokens)
    vocab_size = len(counts) + 2  # plus the two sentinels

    # datastore: one entry per token, key from the position
    store = []
    for i, w in enumerate(tokens):
        key = [((i * 5) % 16) / 8 - 1.0, ((i * 3) % 8) / 8]
        store.append((key, w))

    positions = []
    for i, w in enumerate(tokens):
        sx = ((i % 3) - 1) / 8
        sy = (((i * 7) % 5) - 2) / 8
        query = [store[i][0][0] + sx, store[i][0][1] + sy]
        # add-one unigram base model
        logp = f32(math.log((counts[w] + 1) / (len(tokens) + vocab_size)))
        positions.append({"target": w, "query": query, "logp": logp})

    nll = 0.0
    base_nll = 0.0
    misses = 0
    for p in positions:
        q = p["query"]
        dists = sorted(
            ((q[0] - k[0]) ** 2 + (q[1] - k[1]) ** 2, idx) for idx, (k, _) in enumerate(store)
        )[:K]
        weights = [(math.exp(-d), store[idx][1]) for d, idx in dists]
        z = sum(w for w, _ in weights)
        p_knn = sum(w for w, v in weights if v == p["target"]) / z
        misses += p_knn == 0.0
        p_lm = math.exp(p["logp"])
        nll -= math.log(LAMBDA * p_knn + (1 - LAMBDA) * p_lm)
        base_nll -= p["logp"]

    out = {
        "text": TEXT,
        "k": K,
        "lambda": LAMBDA,
        "datastore": [{"key": k, "value": v} for k, v in store],
        "positions": positions,
        "expected_base_perplexity": math.exp(base_nll / len(positions)),
        "expected_perplexity": math.exp(nll / len(positions)),
        "expected_misses": misses,
    }
    Path(__file__).with_name("pencil.json").write_text(json.dumps(out, indent=1) + "\n")


if __name__ == "__main__":
    main()
