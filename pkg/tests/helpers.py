"""Shared builders for the test modules."""

import json
from pathlib import Path

import numpy as np

GOLDEN = Path(__file__).parent / "golden"


def banded_label(ids, size=32):
    # one horizontal band per class id, in the order given
    label = np.zeros((size, size), dtype=np.int64)
    for k, cid in enumerate(ids):
        label[2 + 2 * k : 3 + 2 * k, 4:-4] = cid
    return label


def prompt_cases():
    return json.loads((GOLDEN / "prompts.json").read_text())


def fd_gradient(fn, x, h=1e-6):
    """Central finite differences of the scalar ``fn`` at every entry of ``x``."""
    import torch

    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = fn(x).item()
            flat[i] = old - h
            down = fn(x).item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    import torch

    return (torch.linalg.vector_norm(a - b) / max(torch.linalg.vector_norm(a), torch.linalg.vector_norm(b), 1e-300)).item()


def random_label_pair(rng, size=32, k=4):
    """Either speckle noise or a few overlapping discs per class, so that both
    fragmented and compact shapes are covered."""
    import numpy as np

    if rng.random() < 0.3:
        return rng.integers(0, k, (size, size)), rng.integers(0, k, (size, size))
    yy, xx = np.mgrid[:size, :size]
    maps = []
    for _ in range(2):
        lab = np.zeros((size, size), dtype=np.int64)
        for c in range(1, k):
            if rng.random() < 0.15:
                continue  # class absent from this map
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(2, size / 3)
            lab[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = c
        maps.append(lab)
    return maps[0], maps[1]
