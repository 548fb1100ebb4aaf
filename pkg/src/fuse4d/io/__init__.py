"""Manifests, codecs, pipeline stages, CLI, and the review HTTP service."""
