"""Personalized biomedical knowledge graphs and a bi-attention temporal GNN
for clinical prediction."""

__version__ = "0.1.0"
