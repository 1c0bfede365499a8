"""Desk-scale experimental machinery: synthetic histories, two-round QA, variants."""
