"""
Tests for the pm-glmm library
"""
