"""Class-incremental 3D object detection by static-dynamic co-teaching."""

__version__ = "0.1.0"
