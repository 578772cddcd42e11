"""Shared exception types."""

from __future__ import annotations


class PlugsimError(Exception):
    """Base class for all errors raised by this package."""


class ConfigParse(PlugsimError):
    """A config document could not be read or parsed at all."""


class ConfigInvalid(PlugsimError):
    """A config document parsed but violates the schema.

    ``field`` is the dotted/indexed path of the offending entry,
    e.g. ``"agents[2].agent_id"``.
    """

    def __init__(self, field: str, reason: str = ""):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}" if reason else field)
