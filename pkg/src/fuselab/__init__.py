"""Joint mammography-ultrasound lesion classification by feature fusion."""

__version__ = "0.1.0"
