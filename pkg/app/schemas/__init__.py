"""Pydantic schemas for maldnerf."""
