"""Desk-scale text-conditioned 3D volume generation and evaluation."""

__version__ = "0.1.0"
