"""Errors raised by the fixture generator."""


class GenError(Exception):
    """Bad input, unknown encoder, or a row that cannot be written."""
