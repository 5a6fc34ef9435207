"""Minimal transition functions and controlled simulation of jump Markov
processes on finite or truncated-countable state spaces."""

__version__ = "0.1.0"
