"""Indirect feature-restoration diffusion: schedule, restoration network, sampler"""
