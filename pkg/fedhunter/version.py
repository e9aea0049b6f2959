# noqa: C801
__version__ = "0.0.1+d20261018"
