"""Integration test package"""
