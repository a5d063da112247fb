"""Exception types raised by the pipeline stages.

Every error carries a stable ``code`` string so batch runners can count
exclusions and the CLI can emit a machine-readable report.
"""


class PipelineError(Exception):
    code = "PIPELINE_ERROR"

    def __init__(self, message: str = "", **context):
        super().__init__(message or self.code)
        self.context = context

    def to_dict(self) -> dict:
        return {"code": self.code, "message": str(self), **self.context}


class Unobservable(PipelineError):
    code = "UNOBSERVABLE"


class InsufficientSegment(PipelineError):
    code = "INSUFFICIENT_SEGMENT"


class IncompletePass(PipelineError):
    code = "INCOMPLETE_PASS"


class DegenerateAngle(PipelineError):
    code = "DEGENERATE_ANGLE"


class SegmentTooShort(PipelineError):
    code = "SEGMENT_TOO_SHORT"


class NegativeDwell(PipelineError):
    code = "NEGATIVE_DWELL"


class NoReports(PipelineError):
    code = "NO_REPORTS"


class MissingDwell(PipelineError):
    code = "MISSING_DWELL"


class ScenarioError(PipelineError):
    code = "SCENARIO_ERROR"
