"""Rank-weighted cross-entropy conformal training toolkit."""
