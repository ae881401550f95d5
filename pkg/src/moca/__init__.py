"""moca: desk-scale multimodal textbook question answering pipeline."""

__version__ = "0.1.0"
