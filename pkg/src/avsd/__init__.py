"""Dialog about videos: question and history encoders, multimodal fusion, answer decoder."""

__version__ = "0.1.0"
