"""pasr: a desk-scale multilingual end-to-end ASR laboratory on synthetic corpora."""

__version__ = "0.1.0"
