"""Seeded random streams.

Every random draw goes through :func:`make_rng`, which builds a numpy
``Generator`` on the counter-based Philox bit generator. A stream is
identified by ``(seed, stream_id)``: the pair is fed to ``SeedSequence`` as
entropy plus spawn key, so streams never overlap and do not depend on the
order in which they are created. Philox output is specified bit-for-bit,
which keeps runs reproducible across platforms.

Stream ids in use: 0-3 training (see ``train_denoiser``), 10 initial noise
``x_T``, 11 reference data for MMD.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))
