"""Force-aware vision-language-action policies at desk scale."""

__version__ = "0.1.0"
