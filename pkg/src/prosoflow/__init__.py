"""Prosody-aware text-to-speech at desk scale.

Pipeline: synthetic pseudo-speech corpus -> pitch shape processing ->
phrase break handling -> intonation token encoding -> flow-matching
mel decoder, plus the objective evaluation metrics and a prosody
control surface.  Everything runs deterministically on CPU.
"""

__version__ = "0.1.0"
