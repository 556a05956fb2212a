"""Finite-difference checking of whole parameter dictionaries."""

import numpy as np

from segfuse.autodiff import Tensor, finite_diff_check


def params_gradcheck(params: dict, loss_fn, step: float = 1e-5,
                     max_elems: int | None = None, seed: int = 0) -> float:
    """Worst relative error of d loss / d params against central differences.

    Flattens every tensor in ``params`` into one probe vector.  When
    ``max_elems`` is given, only a random subset of coordinates is probed
    (the loss is still a function of just those coordinates, with the
    rest frozen), which keeps large blocks affordable.
    """
    names = sorted(params)
    sizes = [params[n].data.size for n in names]
    total = int(np.sum(sizes))
    base = np.concatenate([params[n].data.reshape(-1) for n in names])

    if max_elems is not None and max_elems < total:
        idx = np.sort(np.random.default_rng(seed).choice(total, size=max_elems, replace=False))
    else:
        idx = np.arange(total)

    frozen = base.copy()
    frozen[idx] = 0.0

    def rebuild(flat_sub):
        from segfuse import autodiff as ad

        full = ad.scatter_rows(ad.reshape(flat_sub, (len(idx), 1)), idx, total)
        full = ad.add(ad.reshape(full, (total,)), Tensor(frozen))
        rebuilt = {}
        off = 0
        for n, s in zip(names, sizes):
            rebuilt[n] = ad.reshape(ad.slice_axis(full, 0, off, off + s), params[n].shape)
            off += s
        return rebuilt

    def f(sub):
        return loss_fn(rebuild(sub))

    return finite_diff_check(f, Tensor(base[idx]), step=step)
