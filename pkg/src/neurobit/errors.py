"""Exception hierarchy shared by every neurobit module."""


class NeurobitError(Exception):
    """Base class for all errors raised by neurobit."""

    kind = "error"

    def to_dict(self):
        return {"error": self.kind, "message": str(self)}


class ArgumentError(NeurobitError, ValueError):
    kind = "argument_error"


class ShapeError(NeurobitError, ValueError):
    kind = "shape_error"


class LoadError(NeurobitError):
    """Malformed export file. ``field`` names the offending header/array field."""

    kind = "load_error"

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field

    def to_dict(self):
        d = super().to_dict()
        d["field"] = self.field
        return d


class EmptyDatasetError(NeurobitError):
    kind = "empty_dataset"


class DesignError(NeurobitError):
    kind = "design_error"


class FitError(NeurobitError):
    kind = "fit_error"


class TrainingError(NeurobitError):
    """Non-finite loss during training."""

    kind = "training_error"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def to_dict(self):
        d = super().to_dict()
        d["diagnostics"] = self.diagnostics
        return d


class FoldError(NeurobitError):
    kind = "fold_error"

    def __init__(self, message, fold=None):
        super().__init__(message)
        self.fold = fold

    def to_dict(self):
        d = super().to_dict()
        d["fold"] = self.fold
        return d
