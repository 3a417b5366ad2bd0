"""Command-line interface for maldnerf."""
