"""Figure regeneration for redps experiment CSVs.

Reads only the documented CSV schemas; never recomputes statistics.
"""

__version__ = "0.1.0"
