"""Particle simulations and functional-inequality checks for the Keller-Segel system."""
__version__ = "0.1.0"
