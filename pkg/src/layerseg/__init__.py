"""Instance segmentation via object layering.

A two-head fully-convolutional model distributes adjacent and overlapping
objects into different output channels; instances are then read off as
per-layer connected components.
"""

__version__ = "0.1.0"
