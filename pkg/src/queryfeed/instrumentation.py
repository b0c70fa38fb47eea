"""Process-wide counters proving which code paths a stage exercised.

Feed refresh must be lookup-only: tests assert the encoder and index
counters stay flat across a refresh.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class Counters:
    encoder_calls: int = 0
    index_searches: int = 0

    def reset(self) -> None:
        self.encoder_calls = 0
        self.index_searches = 0

    def snapshot(self) -> tuple[int, int]:
        return (self.encoder_calls, self.index_searches)


counters = Counters()
