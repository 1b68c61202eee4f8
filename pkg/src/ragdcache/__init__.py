"""Disk-backed shared KV-cache store and serving simulator for RAG workloads."""

__version__ = "0.1.0"
