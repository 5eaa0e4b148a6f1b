"""Discriminator-guided controllable Verilog generation."""
__version__ = "0.1.0"
