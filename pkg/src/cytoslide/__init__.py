"""Cervical-cytology slide pipeline: pyramids, registration, ink ROIs,
superpixel cell graphs, labelled patches and classifier evaluation."""

__version__ = "0.1.0"
