"""Common utilities: configuration and logging"""
