"""Timetable-independent junction capacity under dynamic traffic distributions."""

__version__ = "0.1.0"
