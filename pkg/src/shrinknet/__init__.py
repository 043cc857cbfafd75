"""Compress identity-embedding CNNs by pruning and distillation, and verify them."""
