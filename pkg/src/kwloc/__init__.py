"""Weakly supervised keyword detection and localisation with small 1-D CNNs."""
