"""Execution-trie workflow control."""
__version__ = "0.1.0"
