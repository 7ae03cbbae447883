"""Desk-scale parameter-efficient tuning for code review tasks."""
