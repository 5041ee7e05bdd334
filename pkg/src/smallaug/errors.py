"""Exception hierarchy shared across the package."""


class SmallAugError(Exception):
    """Base class for every error raised by smallaug."""


class MalformedLine(SmallAugError):
    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        msg = f"malformed annotation line {line_no}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class DegenerateBox(SmallAugError):
    def __init__(self, line_no: int):
        self.line_no = line_no
        super().__init__(f"box on line {line_no} is empty after clipping to the image")


class SchemaError(SmallAugError):
    def __init__(self, path: str, reason: str = ""):
        self.path = path
        super().__init__(f"{path}: {reason}" if reason else path)


class SourceTooLarge(SmallAugError):
    pass


class EmptyPolicySet(SmallAugError):
    pass


class ObjectiveFailure(SmallAugError):
    """Raised when the objective fails; ``history`` holds the trials completed so far."""

    def __init__(self, index: int, history: list, cause: BaseException | None = None):
        self.index = index
        self.history = history
        super().__init__(f"objective failed at trial {index}: {cause!r}")


class TooFewImages(SmallAugError):
    pass


class NotEnoughTrials(SmallAugError):
    pass


class EvaluatorFailure(SmallAugError):
    def __init__(self, fold: int, trial: int | None, history: list, cause: BaseException | None = None):
        self.fold = fold
        self.trial = trial
        self.history = history
        self.cause = cause
        where = f"fold {fold}" if trial is None else f"fold {fold}, trial {trial}"
        super().__init__(f"evaluator failed at {where}: {cause}")


class EvaluatorProtocolError(SmallAugError):
    def __init__(self, message: str, stderr: str = ""):
        self.stderr = stderr
        super().__init__(message if not stderr else f"{message}\n--- stderr ---\n{stderr}")


class UnknownImageId(SmallAugError):
    pass
