"""Electron-nuclear spin simulation and analysis for boron-vacancy defects in hBN."""

__version__ = "0.1.0"
