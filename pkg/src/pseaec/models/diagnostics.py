import numpy as np
import torch

from ..embedding import EMBEDDING_DIM


def protected_end(n, win, hop):
    """Last output sample that cannot see inputs after sample ``n``.

    Output sample s mixes frames t with t*hop <= s < t*hop + win, and frame t
    reads up to sample t*hop + win - 1. For ``n`` on the frame-end grid
    (n = t*hop + win - 1) this equals ``n - (win - hop)``.
    """
    t_max = (n - win + 1) // hop
    return (t_max + 1) * hop - 1


def causality_check(model, trials=10, length=None, seed=0, path="full", grid_aligned=True):
    """Largest output change before the protected boundary under future perturbations.

    Each trial draws inputs and a cut point ``n``, replaces every mic and
    far-end sample after ``n`` with fresh noise, and compares the two outputs
    up to :func:`protected_end`. Returns the max absolute difference.
    """
    c = model.config
    rng = np.random.default_rng(seed)
    length = length or 12 * c.hop + c.win
    worst = 0.0
    for _ in range(trials):
        mic = rng.standard_normal(length) * 0.1
        far = rng.standard_normal(length) * 0.1
        emb = rng.standard_normal(EMBEDDING_DIM)
        emb /= np.linalg.norm(emb)
        if grid_aligned:
            t = int(rng.integers(0, (length - c.win) // c.hop))
            n = t * c.hop + c.win - 1
        else:
            n = int(rng.integers(c.win - 1, length - 1))
        mic2, far2 = mic.copy(), far.copy()
        mic2[n + 1:] = rng.standard_normal(length - n - 1)
        far2[n + 1:] = rng.standard_normal(length - n - 1)
        with torch.no_grad():
            e = emb if model.is_personalized else None
            a = model(torch.as_tensor(mic, dtype=model.dtype)[None],
                      torch.as_tensor(far, dtype=model.dtype)[None], e, path=path)[0]
            b = model(torch.as_tensor(mic2, dtype=model.dtype)[None],
                      torch.as_tensor(far2, dtype=model.dtype)[None], e, path=path)[0]
        end = protected_end(n, c.win, c.hop)
        worst = max(worst, float((a[: end + 1] - b[: end + 1]).abs().max()))
    return worst
