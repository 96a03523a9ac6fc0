"""Exception hierarchy shared by all phenocloud modules."""


class PhenoError(Exception):
    """Base class for every error raised by phenocloud."""


class InvalidArgument(PhenoError, ValueError):
    pass


class ParseError(PhenoError):
    """Malformed input file. ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedFormat(PhenoError):
    pass


class IoError(PhenoError, OSError):
    pass


class InsufficientPoints(PhenoError):
    pass


class EmptyCloud(PhenoError):
    pass


class NoPlaneFound(PhenoError):
    pass


class EmptyBand(PhenoError):
    pass


class DegenerateHull(PhenoError):
    pass


class DegenerateShape(PhenoError):
    pass


class NoDagOrder(PhenoError):
    pass


class AngleUndefined(PhenoError):
    pass


class NoSplit(PhenoError):
    pass


class ImportConflict(PhenoError):
    """Label import referenced point ids that do not exist in the cloud."""

    def __init__(self, ids):
        self.ids = sorted(int(i) for i in ids)
        shown = ", ".join(str(i) for i in self.ids[:20])
        more = "" if len(self.ids) <= 20 else f" (+{len(self.ids) - 20} more)"
        super().__init__(f"unknown point ids in import: {shown}{more}")


class RankDeficient(PhenoError):
    pass


class EmptyModel(PhenoError):
    """Stepwise selection admitted no feature. ``model`` is the intercept-only fit."""

    def __init__(self, model=None):
        super().__init__("no feature is admissible; intercept-only model")
        self.model = model


class FoldError(PhenoError):
    pass


class SchemaError(PhenoError):
    pass


class ConfigError(PhenoError):
    pass
