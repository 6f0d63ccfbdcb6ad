"""
Simulation Engine
Deterministic clock and periodic event queue driving every component.
"""
import heapq
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

from .errors import InvariantViolation

logger = logging.getLogger(__name__)


@dataclass(order=True)
class ScheduledEvent:
    """A periodic event; ordering is (time, priority, seq)"""
    time: int
    priority: int
    seq: int
    name: str = field(compare=False)
    period: int = field(compare=False)
    callback: Callable[[int], None] = field(compare=False)


class SimClock:
    """
    Single simulated clock in nanoseconds.

    Events fire at their exact scheduled time while time advances, so a
    periodic timer never drifts no matter how long the step that crosses
    it is.
    """

    # Priorities for events sharing a timestamp
    PRIORITY_REFRESH = 0
    PRIORITY_DEFENSE = 10
    PRIORITY_SAMPLER = 20

    def __init__(self, start: int = 0):
        self.now = int(start)
        self._queue: List[ScheduledEvent] = []
        self._seq = 0
        self._firing = False
        self.fired = 0

    def schedule_every(self, name: str, period: int, callback: Callable[[int], None],
                       start: Optional[int] = None, priority: int = 50):
        """
        Register a periodic callback.

        Args:
            name: Event label (used for cancel and logs)
            period: Nanoseconds between firings, > 0
            callback: Called with the firing time
            start: First firing time (defaults to now + period)
            priority: Lower fires first among events at the same time
        """
        if period <= 0:
            raise ValueError(f"period must be positive, got {period}")
        first = self.now + period if start is None else int(start)
        heapq.heappush(self._queue, ScheduledEvent(first, priority, self._seq, name, int(period), callback))
        self._seq += 1

    def cancel(self, name: str):
        self._queue = [e for e in self._queue if e.name != name]
        heapq.heapify(self._queue)

    def next_event_time(self) -> Optional[int]:
        return self._queue[0].time if self._queue else None

    def advance(self, ns: int):
        """Move time forward by ns, firing due events on the way"""
        if ns < 0:
            raise InvariantViolation(f"clock cannot move backwards ({ns} ns)")
        self.run_until(self.now + ns)

    def run_until(self, target: int):
        if self._firing:
            raise InvariantViolation("clock advanced from inside an event callback")
        target = int(target)
        queue = self._queue
        while queue and queue[0].time <= target:
            event = heapq.heappop(queue)
            self.now = max(self.now, event.time)
            self._firing = True
            try:
                event.callback(event.time)
            finally:
                self._firing = False
            self.fired += 1
            event.time += event.period
            heapq.heappush(queue, event)
        self.now = max(self.now, target)

    def shift(self, delta: int):
        """Jump forward by delta, moving every pending event with it"""
        if delta < 0:
            raise InvariantViolation("clock shift must be forward")
        self.now += delta
        for event in self._queue:
            event.time += delta
        heapq.heapify(self._queue)
