"""Two-tower semantic retrieval and Siamese pairwise re-ranking for product search."""

__version__ = "0.1.0"
