"""Sharded health-risk prediction backend with an asynchronous scoring pipeline."""

__version__ = "0.1.0"
