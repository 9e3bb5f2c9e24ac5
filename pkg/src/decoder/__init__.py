"""Decoder blocks for the restored high-level feature"""
