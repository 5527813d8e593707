"""Normal-guided depth completion from sparse LiDAR and a color image."""

__version__ = "0.1.0"
