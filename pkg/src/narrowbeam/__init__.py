"""Narrow-beam transport toolkit: Fokker-Planck Monte Carlo, Fermi pencil beams,
ballistic transport, and bounded-Lipschitz distances between them."""

__version__ = "0.1.0"
