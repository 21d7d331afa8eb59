"""Per-phase wall-clock accumulators."""

import time
from contextlib import contextmanager

from .errors import MeasurementError

PHASES = ("forward", "backward_dx", "backward_dw", "update", "eval")


class PhaseTimer:
    """Accumulates nanoseconds and call counts per training phase.

    Phases are timed with ``time.perf_counter_ns`` around the trainer's call
    sites; glue between phases is deliberately not attributed to any phase.
    """

    def __init__(self, clock=time.perf_counter_ns):
        self.clock = clock
        self.ns = dict.fromkeys(PHASES, 0)
        self.counts = dict.fromkeys(PHASES, 0)

    @contextmanager
    def phase(self, name):
        t0 = self.clock()
        try:
            yield
        finally:
            dt = self.clock() - t0
            if dt < 0:
                raise MeasurementError(f"clock went backwards by {-dt} ns in phase {name!r}")
            self.ns[name] += dt
            self.counts[name] += 1

    def ms(self, name):
        return self.ns[name] / 1e6

    def snapshot(self):
        return dict(self.ns)

    def since(self, snapshot):
        """Milliseconds per phase accumulated after ``snapshot`` was taken."""
        return {k: (self.ns[k] - snapshot[k]) / 1e6 for k in PHASES}

    def reset(self):
        for k in PHASES:
            self.ns[k] = 0
            self.counts[k] = 0
