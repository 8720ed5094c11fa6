"""API layer: report schemas and CLI command handlers."""
