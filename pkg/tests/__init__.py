"""
Tests for Minseek Toolbox.
"""
