"""Large age-gap face verification: Siamese embedding networks with feature injection."""

__version__ = "0.1.0"
