"""Point+line visual odometry backend with structural and Manhattan-axes
constraints, validated against a built-in synthetic Manhattan-world simulator."""

__version__ = "0.1.0"
