"""medvidqa-kit - A CLI toolkit for medical video question answering over transcripts and frame features."""

__version__ = "0.4.0"
