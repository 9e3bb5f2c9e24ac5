"""Per-image feature optimization and feature-deviation diagnostics"""
