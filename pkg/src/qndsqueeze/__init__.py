"""Spin squeezing of a collective spin by continuous J_z measurement and
Markovian feedback."""
__version__ = "0.1.0"
