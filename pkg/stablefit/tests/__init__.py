"""stablefit test suite."""
