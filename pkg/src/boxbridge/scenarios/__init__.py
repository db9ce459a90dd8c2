"""Bundled scenario documents, loadable by name through the cli module."""
