"""Exception types shared across the package."""


class ChoreoError(Exception):
    """Base class for all errors raised by this package."""


class OrderingError(ChoreoError):
    """A heartbeat arrived with a non-increasing timestamp or sequence number."""


class UnavailableError(ChoreoError):
    """A detector was queried before it has the data to answer."""


class SchedulingError(ChoreoError):
    """An event was scheduled in the simulated past."""


class TaxonomyError(ChoreoError):
    """A category is missing from the taxonomy, or the taxonomy is malformed."""


class RecipeError(ChoreoError):
    """A recipe violates its structural invariants."""


class StateError(ChoreoError):
    """An operation was applied to a runtime configuration in the wrong status."""


class RoutingError(ChoreoError):
    """A message arrived on a port that is not bound by the interaction descriptor."""


class RegistrationError(ChoreoError):
    """An offering description was rejected at registration."""


class ConfigError(ChoreoError):
    """A configuration document failed to parse or validate.

    ``field`` names the offending field (dotted path into the document) so
    command line diagnostics can point at it.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message
