"""AirShield: wireless telemetry poisoning, detection and incident explanation toolkit"""

__version__ = "1.0.0"
