"""Deterministic random-number streams for replicated experiments.

Every replication of a Monte Carlo run gets its own counter-based
generator, keyed by (replication, stage). Workers can therefore split
the replication range any way they like and still produce output that
is byte-identical to a serial run.
"""

from __future__ import annotations

import numpy as np

# stage keys used by the simulation pipeline
NETWORK_STAGE = 0
OUTCOME_STAGE = 1
# stage keys used by the covariance-formula oracle
ORACLE_BATCH_STAGE = 2
ORACLE_CONFIG_STAGE = 3


def substream(master_seed: int, replication: int, stage: int) -> np.random.Generator:
    """Return the generator for one (replication, stage) cell.

    Parameters
    ----------
    master_seed : int
        Seed of the whole experiment.
    replication : int
        Zero-based replication index.
    stage : int
        Which draw stage within the replication (network formation,
        outcome innovations, ...). Distinct stages never share bits.

    Returns
    -------
    numpy.random.Generator
        Philox-backed generator independent of every other cell.
    """
    ss = np.random.SeedSequence(master_seed, spawn_key=(replication, stage))
    return np.random.Generator(np.random.Philox(ss))
