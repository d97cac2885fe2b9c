"""Higher-order hard-sphere kinetics: collision law, particle dynamics and hierarchy Monte Carlo."""

__version__ = "0.1.0"
