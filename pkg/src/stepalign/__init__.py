"""Multi-sentence video-text grounding with LLM-style step curation and self-training."""

__version__ = "0.1.0"
