"""Named, independent random substreams derived from one run seed."""

import zlib

import numpy as np


def substream(seed, name):
    """Generator for substream ``name`` (e.g. ``"scenario"``, ``"init"``, ``"shuffle"``)."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))
