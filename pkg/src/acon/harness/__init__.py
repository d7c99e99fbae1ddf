"""Desk-scale training harness: layers, networks, models, data, training and checkpoints."""
