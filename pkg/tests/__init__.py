"""Test suite for the offload_bridge package."""
