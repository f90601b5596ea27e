"""Heat and visit-isolation analysis toolkit."""

__version__ = "0.1.0"
