"""Depth losses, evaluation metrics and significance testing"""
