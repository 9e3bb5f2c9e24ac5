"""Auxiliary-viewpoint low-level feature enhancement"""
