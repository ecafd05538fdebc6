"""Configuration, run directories, CLI and reports."""
