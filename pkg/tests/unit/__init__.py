"""Unit test package"""
