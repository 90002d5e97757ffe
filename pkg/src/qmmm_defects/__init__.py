"""QM/MM coupling for crystalline defects with machine-learned MM site potentials."""

__version__ = "0.1.0"
