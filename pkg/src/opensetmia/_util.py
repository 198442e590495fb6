"""Seeding helpers and shared exceptions."""

import hashlib
import zlib

import numpy as np


class ContractError(ValueError):
    """Input violates a documented precondition or invariant."""


class DataFormatError(ValueError):
    """A file on disk could not be parsed into the expected structure."""


def substream(seed, name):
    """Independent generator for a named stage, derived from one global seed."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & (2**63 - 1), spawn_key=(key,)))


def sample_seed(seed, sample_id):
    """Stable per-sample seed so parallel and serial evaluation agree."""
    digest = hashlib.sha256(f"{int(seed)}:{sample_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def sub_seed(seed, name):
    """Integer seed for a named stage, for APIs that take a seed rather than a generator."""
    return int(substream(seed, name).integers(0, 2**62))
