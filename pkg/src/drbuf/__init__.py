"""Distributed rehearsal buffer for class-incremental data-parallel training."""

from drbuf.buffer import LocalRehearsalBuffer
from drbuf.core import MiniBatch, Mode, RunConfig, Sample
from drbuf.engine import RehearsalEngine
from drbuf.sampler import GlobalSampler, SizeTable

__all__ = ["LocalRehearsalBuffer", "MiniBatch", "Mode", "RunConfig", "Sample", "RehearsalEngine",
           "GlobalSampler", "SizeTable"]
__version__ = "0.1.0"
