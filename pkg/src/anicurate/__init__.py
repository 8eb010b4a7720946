"""Animation clip curation, conditioning data, and generation benchmarking."""

__version__ = "0.1.0"
