"""Slow, obviously-correct reference implementations used by the tests."""

import numpy as np


def pairwise_auc(scores, labels):
    """Count every (positive, negative) pair; ties earn half credit."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    twice = 0
    for p in pos:
        for n in neg:
            twice += 2 if p > n else 1 if p == n else 0
    return (twice / 2) / (float(len(pos)) * float(len(neg)))


def enumerated_ap(scores, labels):
    """Walk every distinct threshold from high to low and add (delta recall) * precision."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        chosen = scores >= t
        tp = int(np.sum(chosen & (labels == 1)))
        rec = tp / n_pos
        total += (rec - prev_recall) * (tp / int(chosen.sum()))
        prev_recall = rec
    return total


def random_prediction_set(rng, max_size=1000):
    """Random scores with deliberate ties and both classes present."""
    n = int(rng.integers(2, max_size + 1))
    if rng.random() < 0.5:
        scores = rng.integers(0, max(2, n // 5), n) / max(2, n // 5)
    else:
        scores = rng.random(n)
    labels = (rng.random(n) < rng.uniform(0.05, 0.6)).astype(np.int8)
    labels[0], labels[1] = 1, 0
    return scores, labels
