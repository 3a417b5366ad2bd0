"""Tests package for maldnerf."""
