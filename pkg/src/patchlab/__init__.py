"""Desk-scale model patching laboratory."""
