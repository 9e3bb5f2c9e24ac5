"""Tensor substrate: primitives, parameter storage, gradient checks and persistence"""
