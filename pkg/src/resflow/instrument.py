"""Counting of retained intermediate arrays.

The two log-determinant gradient routines differ in how much state they
must keep alive: the Neumann-series form overwrites a single running
vector, while the differentiate-every-term form must keep every power of
the Jacobian applied to the probe vector until the backward sweep runs.
The meter makes that difference testable without resorting to wall-clock
or allocator tricks: gradient routines report every array they hold onto
and every array they drop.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class StorageMeter:
    """Tracks the number of simultaneously retained intermediate arrays."""

    current: int = 0
    peak: int = 0

    def retain(self, n: int = 1) -> None:
        self.current += n
        if self.current > self.peak:
            self.peak = self.current

    def release(self, n: int = 1) -> None:
        self.current -= n


@dataclass
class RetainedList:
    """List of intermediates whose length is reported to a meter.

    Appending retains one array; ``drop_all`` releases the whole list.
    A ``None`` meter makes this a plain list wrapper with zero overhead
    in the hot paths.
    """

    meter: StorageMeter | None = None
    items: list = field(default_factory=list)

    def append(self, arr) -> None:
        self.items.append(arr)
        if self.meter is not None:
            self.meter.retain()

    def replace_last(self, arr) -> None:
        """Overwrite the most recent item in place (no net retention)."""
        self.items[-1] = arr

    def __getitem__(self, i):
        return self.items[i]

    def __len__(self) -> int:
        return len(self.items)

    def drop_all(self) -> None:
        if self.meter is not None:
            self.meter.release(len(self.items))
        self.items.clear()
