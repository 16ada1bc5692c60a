"""Desk-scale testbed for shilling attacks on graph recommenders.

Train a small rating-graph recommender with an integrated fraudster
detector, inject optimized or heuristic fake-user profiles, and measure
how far target-item promotion gets past posterior-based defenses.
"""

__version__ = "0.1.0"
