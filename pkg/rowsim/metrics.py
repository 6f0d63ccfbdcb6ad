"""
Metrics Module
Run counters, the periodic sampler and csv/json export of the time series.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, List, Optional

import pandas as pd

from .errors import MetricsExportError

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    'sim_ns', 'rsvd_faults', 'refreshes', 'leak_events', 'pt_nodes',
    'adj_nodes', 'ring_capacity', 'flips_pt', 'flips_other',
]


@dataclass
class RunCounters:
    """Monotone event counters shared by all components of one run"""
    activations: int = 0
    faults: int = 0
    rsvd_faults: int = 0
    leak_events: int = 0
    refreshes: int = 0
    armed_ptes: int = 0
    flips_pt: int = 0
    flips_other: int = 0
    trr_refreshes: int = 0

    def snapshot(self) -> Dict[str, int]:
        return asdict(self)

    def add_scaled(self, delta: Dict[str, int], times: int):
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + delta.get(f.name, 0) * times)

    @property
    def flips_total(self) -> int:
        return self.flips_pt + self.flips_other

    @staticmethod
    def diff(after: Dict[str, int], before: Dict[str, int]) -> Dict[str, int]:
        return {k: after[k] - before.get(k, 0) for k in after}


class MetricsRecorder:
    """
    Collects one row per sampling interval.

    Event columns hold per-interval deltas; pt_nodes, adj_nodes and
    ring_capacity are gauges read at sampling time.
    """

    def __init__(self, counters: RunCounters, interval_ns: int = 1_000_000):
        self.counters = counters
        self.interval_ns = interval_ns
        self.rows: List[list] = []
        self.footprint: List[Dict] = []
        self.gauge_source: Optional[Callable[[], Dict]] = None
        self._last = counters.snapshot()

    def attach(self, clock):
        clock.schedule_every('metrics-sample', self.interval_ns, self.sample,
                             priority=clock.PRIORITY_SAMPLER)

    def sample(self, now: int):
        current = self.counters.snapshot()
        delta = RunCounters.diff(current, self._last)
        self._last = current
        gauges = self.gauge_source() if self.gauge_source else {}
        self.rows.append([
            int(now),
            delta['rsvd_faults'],
            delta['refreshes'],
            delta['leak_events'],
            gauges.get('pt_nodes', 0),
            gauges.get('adj_nodes', 0),
            gauges.get('ring_capacity', 0),
            delta['flips_pt'],
            delta['flips_other'],
        ])
        if gauges:
            self.footprint.append({'sim_ns': int(now), **gauges})

    def replicate(self, windows: int, window_ns: int):
        """Append copies of the last refresh window's rows, shifted in time"""
        per_window = window_ns // self.interval_ns
        if windows <= 0 or per_window == 0 or len(self.rows) < per_window:
            return
        template = self.rows[-per_window:]
        fp_template = [p for p in self.footprint if p['sim_ns'] > template[0][0] - self.interval_ns]
        for w in range(1, windows + 1):
            shift = w * window_ns
            for row in template:
                self.rows.append([row[0] + shift] + row[1:])
            for point in fp_template:
                self.footprint.append({**point, 'sim_ns': point['sim_ns'] + shift})
        self._last = self.counters.snapshot()

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=METRIC_COLUMNS).astype('int64')


def export_metrics(frame: pd.DataFrame, summary: Dict, path: str, fmt: str = 'csv'):
    """
    Write the time series and a summary record.

    Args:
        frame: Sample rows with exactly METRIC_COLUMNS
        summary: Deterministic summary values (no wall-clock fields)
        path: Output file
        fmt: 'csv' or 'json'
    """
    if list(frame.columns) != METRIC_COLUMNS:
        raise ValueError(f"unexpected metric columns: {list(frame.columns)}")
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        if fmt == 'csv':
            body = frame.to_csv(index=False, lineterminator='\n')
            with open(path, 'w', encoding='utf-8', newline='') as fh:
                fh.write(body)
                fh.write(f"# summary: {json.dumps(summary, sort_keys=True)}\n")
        elif fmt == 'json':
            payload = {
                'columns': METRIC_COLUMNS,
                'samples': frame.to_dict(orient='records'),
                'summary': summary,
            }
            with open(path, 'w', encoding='utf-8', newline='') as fh:
                json.dump(payload, fh, sort_keys=True, indent=2, default=int)
                fh.write('\n')
        else:
            raise ValueError(f"unknown metrics format: {fmt}")
    except OSError as e:
        logger.error(f"Metrics export failed for {path}: {e}")
        raise MetricsExportError(f"{path}: {e}") from e
    logger.info(f"Wrote {len(frame)} metric rows to {path} ({fmt})")


def load_metrics(path: str):
    """
    Read a metrics file written by export_metrics.

    Returns:
        (DataFrame of samples, summary dict)
    """
    if path.endswith('.json'):
        with open(path, encoding='utf-8') as fh:
            payload = json.load(fh)
        frame = pd.DataFrame(payload['samples'], columns=payload['columns'])
        return frame, payload.get('summary', {})
    summary = {}
    with open(path, encoding='utf-8') as fh:
        for line in fh:
            if line.startswith('# summary: '):
                summary = json.loads(line[len('# summary: '):])
    frame = pd.read_csv(path, comment='#')
    return frame, summary
