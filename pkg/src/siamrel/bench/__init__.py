"""Synthetic data generation, dataset I/O and evaluation protocols."""
