"""Transient stability prediction with cascaded feedforward networks."""

__version__ = "0.1.0"
