"""Encoder, decoder tail and adaptive-bins depth head"""
