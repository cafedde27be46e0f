"""Entity-driven contrastive training and evaluation for medical question summarization."""

__version__ = "0.1.0"
