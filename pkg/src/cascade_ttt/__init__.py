"""Test-time adaptation for information-cascade prediction.

Graph and hypergraph user encoders feed an LSTM backbone that a small
adaptor customizes per cascade; a self-supervised auxiliary task drives
per-cascade adaptation at test time, and meta-auxiliary training prepares the
model for it.
"""

__version__ = "0.1.0"
