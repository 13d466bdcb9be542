"""Cross-pair subject-to-video training sample curation."""

__version__ = "0.1.0"
