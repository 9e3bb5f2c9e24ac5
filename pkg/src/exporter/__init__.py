"""Exporter package - Prometheus metrics written per run"""
