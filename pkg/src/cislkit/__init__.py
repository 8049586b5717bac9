"""cislkit: lung CT imaging-sign patch synthesis and classification on small data."""

__version__ = "0.1.0"
