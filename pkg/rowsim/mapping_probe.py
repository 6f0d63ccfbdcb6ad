"""
Mapping Probe
Recovers the bank XOR functions of a DramModule from row-conflict timing.
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from config import Config
from . import gf2
from .dram import DramModule

logger = logging.getLogger(__name__)

LINE_SHIFT = 6


@dataclass
class LatencySample:
    pa_a: int
    pa_b: int
    latency: float
    conflict: bool


@dataclass
class ProbeResult:
    """Recovered masks; complete is False when the clusters seen do not fill the span"""
    masks: List[int]
    complete: bool
    clusters: int
    samples: int
    candidates_kept: List[int] = field(default_factory=list)

    def hex_masks(self) -> List[str]:
        return [f"{m:#x}" for m in self.masks]


class MappingProbe:
    """
    Timing side channel against a DramModule.

    The row field (bits at and above row_shift) is taken as known so
    that conflicts are only measured between different rows. Bank bits
    may overlap the row field.

    Args:
        dram: Module to probe (row-buffer state is disturbed, memory is not)
        seed: RNG seed for address sampling and timing noise
        noise: Standard deviation of Gaussian timing noise in ns
    """

    def __init__(self, dram: DramModule, seed: int = Config.SEED, noise: float = 0.0):
        self.dram = dram
        self.rng = np.random.default_rng(seed)
        self.noise = float(noise)
        cfg = dram.config
        self.cutoff = (cfg.latency_closed + cfg.latency_conflict) / 2
        self.now = 0

    def _access(self, pa: int) -> int:
        outcome = self.dram.activate(self.dram.map_address(pa), self.now)
        self.now += outcome.latency
        return outcome.latency

    def measure_pair(self, pa_a: int, pa_b: int) -> LatencySample:
        """Access a, b, a and classify the last access"""
        self._access(pa_a)
        self._access(pa_b)
        latency = float(self._access(pa_a))
        if self.noise > 0:
            latency += float(self.rng.normal(0.0, self.noise))
        return LatencySample(pa_a, pa_b, latency, latency >= self.cutoff)

    def conflicts(self, pa_a: int, pa_b: int, repeats: int = 1) -> bool:
        votes = sum(self.measure_pair(pa_a, pa_b).conflict for _ in range(repeats))
        return votes * 2 > repeats

    def _bit_span(self, bit_range: Tuple[int, int]) -> Tuple[int, int]:
        lo, hi = bit_range
        return max(lo, LINE_SHIFT), min(hi, self.dram.config.address_bits - 1)

    def row_of(self, pa: int) -> int:
        return pa >> self.dram.config.row_shift

    def sample_addresses(self, n: int, bit_range: Tuple[int, int]) -> np.ndarray:
        """Random line addresses: bits inside bit_range random, rows random"""
        cfg = self.dram.config
        lo, hi = self._bit_span(bit_range)
        low_hi = min(hi, cfg.row_shift - 1)
        low = self.rng.integers(0, 1 << (low_hi - lo + 1), size=n, dtype=np.int64) << lo
        rows = self.rng.integers(0, cfg.rows_per_bank, size=n, dtype=np.int64) << cfg.row_shift
        return low | rows

    def _match(self, clusters: List[List[int]], pa: int, repeats: int) -> Tuple[Optional[int], bool]:
        """(cluster id, blocked): blocked when a cluster had no member outside pa's row"""
        row = self.row_of(pa)
        blocked = False
        for c, group in enumerate(clusters):
            other = next((m for m in group if self.row_of(m) != row), None)
            if other is None:
                blocked = True
            elif self.conflicts(pa, other, repeats):
                return c, blocked
        return None, blocked

    def cluster(self, addresses: np.ndarray, repeats: int = 1, members: int = 4) -> np.ndarray:
        """
        Bank cluster id of each address. An address joins the first
        cluster holding a member in another row that conflicts with it.
        Addresses that share the row of every member of some cluster are
        retried once the clusters have grown; those still undecided get -1.
        """
        clusters: List[List[int]] = []
        labels = np.full(len(addresses), -1, dtype=np.int64)

        def place(i: int, final: bool) -> bool:
            pa = int(addresses[i])
            c, blocked = self._match(clusters, pa, repeats)
            if c is not None:
                labels[i] = c
                group = clusters[c]
                row = self.row_of(pa)
                if len(group) < members and all(self.row_of(m) != row for m in group):
                    group.append(pa)
                return True
            if blocked and not final:
                return False
            if not blocked:
                labels[i] = len(clusters)
                clusters.append([pa])
            return True

        deferred = [i for i in range(len(addresses)) if not place(i, final=False)]
        for i in deferred:
            place(i, final=True)
        unresolved = int((labels < 0).sum())
        if unresolved:
            logger.debug(f"{unresolved} sampled addresses left unclustered")
        return labels

    def recover_bank_functions(self, sample_budget: int = Config.PROBE_SAMPLES,
                               bit_range: Tuple[int, int] = Config.PROBE_BIT_RANGE,
                               max_bits: int = Config.PROBE_MAX_BITS) -> ProbeResult:
        """
        Cluster sampled addresses by row conflicts, keep every candidate
        mask of at most max_bits bits whose parity is constant inside each
        cluster and not constant overall, and reduce the kept masks to a
        GF(2) basis.
        """
        repeats = 1 if self.noise == 0 else 5
        addresses = self.sample_addresses(sample_budget, bit_range)
        labels = self.cluster(addresses, repeats)
        resolved = labels >= 0
        addresses, labels = addresses[resolved], labels[resolved]
        n_clusters = int(labels.max()) + 1 if len(labels) else 0

        lo, hi = self._bit_span(bit_range)
        bits = list(range(lo, hi + 1))
        kept: List[int] = []
        if n_clusters > 1:
            bit_columns = {b: ((addresses >> b) & 1).astype(np.uint8) for b in bits}
            for k in range(1, max_bits + 1):
                for combo in itertools.combinations(bits, k):
                    par = np.zeros(len(addresses), dtype=np.uint8)
                    for b in combo:
                        par ^= bit_columns[b]
                    if par.min() == par.max():
                        continue
                    ones = np.bincount(labels, weights=par, minlength=n_clusters)
                    sizes = np.bincount(labels, minlength=n_clusters)
                    if np.all((ones == 0) | (ones == sizes)):
                        kept.append(sum(1 << b for b in combo))
        masks = gf2.basis(kept)
        complete = n_clusters == 1 << len(masks)
        if not complete:
            logger.warning(f"Mapping probe incomplete: {n_clusters} clusters for a "
                           f"{len(masks)}-function basis after {sample_budget} samples")
        else:
            logger.info(f"Recovered {len(masks)} bank functions: {[hex(m) for m in masks]}")
        return ProbeResult(masks, complete, n_clusters, int(sample_budget), kept)


def recover_bank_functions(dram: DramModule, sample_budget: int = Config.PROBE_SAMPLES,
                           bit_range: Tuple[int, int] = Config.PROBE_BIT_RANGE,
                           seed: int = Config.SEED, noise: float = 0.0,
                           max_bits: Optional[int] = None) -> ProbeResult:
    probe = MappingProbe(dram, seed, noise)
    return probe.recover_bank_functions(sample_budget, bit_range, max_bits or Config.PROBE_MAX_BITS)
