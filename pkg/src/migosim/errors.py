"""Exception types shared across the simulator."""


class ConfigurationError(ValueError):
    """Invalid static configuration (bad architecture, spec, or config file)."""


class ShapeError(ValueError):
    """Operands disagree on dimensions."""


class DataError(ValueError):
    """Dataset contents violate a precondition (bad labels, not enough examples)."""
