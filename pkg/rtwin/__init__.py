"""Desk-scale radiotherapy digital-twin engine."""
