"""Helper utilities package: field dumps and run configuration."""
