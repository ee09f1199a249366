"""Numpy micro-library and CLI for a lightweight two-class fire/smoke detector.

Importing the package stays free of third-party imports so the CLI can pin
thread-pool environment variables before numpy first loads; pull submodules
(`lightdet.model`, `lightdet.train`, ...) explicitly for the heavy pieces.
"""

__version__ = "0.1.0"
