"""Split DNN inference between a device and an edge server, with optional
transfer layers that shrink the tensor crossing the link."""

__version__ = "0.1.0"
