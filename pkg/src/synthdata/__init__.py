"""Procedural desk-scale scenes with sparse depth and an auxiliary view"""
