"""Shipped scenario files (YAML resources, loaded via builtin_scenario)."""
