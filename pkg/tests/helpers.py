"""Small builders shared by the test modules."""

import numpy as np

from lora2.adapters import Lora2Adapter


def random_adapter(din, dout, k, r, seed, std=1.0, mask=None):
    """A five-factor adapter with every factor, including lam, drawn at random."""
    rng = np.random.default_rng(seed)
    return Lora2Adapter(
        rng.normal(0, std, (din, k)),
        rng.normal(0, std, (k, r)),
        rng.normal(0, 1, r),
        rng.normal(0, std, (r, k)),
        rng.normal(0, std, (k, dout)),
        mask,
    )


def random_scores(ad, rng, full=True):
    """Non-negative smoothed scores per factor, shaped like the adapter's params."""
    names = ("u_out", "u_in", "lam", "v_in", "v_out") if full else ("u_in", "lam", "v_in")
    return {n: rng.exponential(size=ad.params()[n].shape) for n in names}
