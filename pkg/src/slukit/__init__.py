"""slukit: a desk-scale training kit for attention-based end-to-end
spoken language understanding, with multitask and transfer recipes."""

__version__ = "0.1.0"
