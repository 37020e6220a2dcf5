"""Test suite for dppkit."""
