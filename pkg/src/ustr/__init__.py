"""Unified speech-text representation transducer with text-only domain adaptation."""

__version__ = "0.1.0"
