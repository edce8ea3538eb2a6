"""Static PE header analysis for ransomware detection and family attribution."""

__version__ = "0.1.0"
