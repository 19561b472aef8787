"""Set-of-points representation toolkit for remote-sensing vision-language tasks."""

__version__ = "0.1.0"
