"""
Error Types
Exception hierarchy shared by every simulator component.
"""


class SimulationError(Exception):
    """Base class for simulator errors"""


class AddressError(SimulationError, ValueError):
    """Physical or virtual address outside the modelled range"""


class ContractError(SimulationError):
    """An operation was called in a state its contract forbids"""


class PlacementError(ContractError):
    """Requested physical placement targets a pinned page"""


class SegmentationError(SimulationError):
    """Access to a virtual address outside every VMA"""


class OutOfMemoryError(SimulationError):
    """Page allocator exhausted"""


class ConfigError(SimulationError, ValueError):
    """Scenario or component configuration rejected at load time"""


class ScenarioError(SimulationError):
    """An attack scenario could not be set up"""


class InvariantViolation(SimulationError, AssertionError):
    """Internal consistency check failed"""


class MetricsExportError(SimulationError, OSError):
    """Metrics could not be written"""
