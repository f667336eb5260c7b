"""k-clustering LP rounding toolkit."""
