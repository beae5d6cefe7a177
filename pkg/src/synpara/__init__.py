"""Desk-scale encoder-decoder laboratory for syntactically controlled
paraphrase generation with prefix-tuning and parse-instructed prefixes.
"""

__version__ = "0.1.0"
