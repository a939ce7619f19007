"""Exception hierarchy shared by all treecut modules."""


class TreecutError(Exception):
    """Base class for every error raised by treecut."""


class InvalidParameterError(TreecutError, ValueError):
    pass


class InvalidInputError(TreecutError, ValueError):
    pass


class SizeOverflowError(TreecutError):
    """Raised when an exhaustive enumeration would exceed its cap."""

    def __init__(self, count: int, cap: int):
        super().__init__(f"{count} tree-consistent cuts exceed the enumeration cap of {cap}")
        self.count = count
        self.cap = cap


class FormatError(TreecutError):
    pass


class GenerationError(TreecutError):
    pass


class ScoringError(TreecutError):
    """A scorer failed on a segment; ``node_id`` names the tree node when known."""

    def __init__(self, message: str, node_id: str | None = None):
        super().__init__(message)
        self.message = message
        self.node_id = node_id

    def __str__(self) -> str:
        if self.node_id is None:
            return self.message
        return f"node {self.node_id}: {self.message}"


class MissingScoreError(ScoringError):
    def __init__(self, key: str, node_id: str | None = None):
        super().__init__(f"no cached score for segment key {key}", node_id)
        self.key = key
