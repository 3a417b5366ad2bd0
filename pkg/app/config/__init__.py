"""Configuration package for maldnerf."""
