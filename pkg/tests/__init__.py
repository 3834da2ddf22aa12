"""Tests for awaker-moe."""
