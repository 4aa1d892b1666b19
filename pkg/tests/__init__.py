"""Test suite for trackswitch."""
