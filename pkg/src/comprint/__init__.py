"""Compression-fingerprint forgery detection and localization."""
