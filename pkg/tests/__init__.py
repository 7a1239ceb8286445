"""Tests for text-formater."""
