"""Multi-task self-paced learning for bone-quality classification."""
__version__ = "0.1.0"
