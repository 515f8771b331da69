"""Learnable components on a small reverse-mode tape."""
