class ConfigError(ValueError):
    """Invalid pipeline or run configuration."""
