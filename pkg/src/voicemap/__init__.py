"""Voice pathology screening with spectrogram-patch transformers and attention relevance maps."""

__version__ = "0.1.0"
