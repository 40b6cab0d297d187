"""Self-monitoring navigation agent (co-grounding decoder plus progress monitor) on synthetic worlds."""

__version__ = "0.1.0"
