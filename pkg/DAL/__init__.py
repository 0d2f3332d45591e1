"""Config schemas and artifact storage."""
