"""Smoke test package"""
