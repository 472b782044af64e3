"""
Test suite for the HMAE pipeline.
"""
