"""Services package for maldnerf."""
