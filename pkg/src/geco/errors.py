"""Exception types raised across the package."""


class GecoError(Exception):
    pass


class ShapeError(GecoError, ValueError):
    """Tensor or image dimensions violate a module contract."""


class DegenerateBox(GecoError, ValueError):
    """A decoded or supplied box has non-positive width or height."""


class EmptyRegion(GecoError, ValueError):
    """A box covers no feature-grid cells."""


class EmptyDataset(GecoError, ValueError):
    pass


class NonFiniteLoss(GecoError, FloatingPointError):
    def __init__(self, sample_index, value):
        self.sample_index = sample_index
        self.value = value
        super().__init__(f"non-finite loss {value!r} at sample {sample_index}")


class SchemaError(GecoError, ValueError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class MissingImage(GecoError, FileNotFoundError):
    pass


class PlacementFailure(GecoError, RuntimeError):
    """Rejection sampling could not place the requested number of objects."""

    def __init__(self, requested, placed):
        self.requested = requested
        self.placed = placed
        super().__init__(f"placed {placed} of {requested} objects")
