"""Batch pipeline front end: ingestion, orchestration, command line."""
