from typing import Any, Dict, Optional


class SurveyDataError(ValueError):
    """Parse error or invariant violation in a design, counts or holdout file."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(f"{where}{message}")


class DimensionError(ValueError):
    pass


class IdentifiabilityError(ValueError):

    def __init__(self, message: str, report: Optional[Dict[str, Any]] = None):
        self.report = report or {}
        super().__init__(message)


class FitError(ValueError):
    pass


class AlphaError(ValueError):
    pass


class ComparisonError(ValueError):
    pass


class SimulationError(ValueError):
    pass
