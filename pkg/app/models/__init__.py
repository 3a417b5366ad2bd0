"""Torch networks for maldnerf."""
