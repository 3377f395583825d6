"""Semantic parsing toolkit: TOP trees, canonicalization, trie-constrained
beam search and a small prompt-tunable encoder-decoder."""

__version__ = "0.1.0"
