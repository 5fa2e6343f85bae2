"""chainsim: deterministic discrete-event simulator of blockchain
communication protocols under network attacks."""

__version__ = "0.1.0"
