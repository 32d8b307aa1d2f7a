"""
Test package for flowhmm.
"""
