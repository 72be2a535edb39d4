"""Synthetic benchmark, episodic training, evaluation protocol and CLI."""
