"""Tests for mpamatch."""
