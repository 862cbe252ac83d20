"""Searchable fusion of speech-semantic and text-semantic features for speech emotion recognition."""

__version__ = "0.1.0"
