"""Exception hierarchy shared by every module."""


class StealthSimError(Exception):
    """Base class for all package errors."""

    code = "error"

    def to_dict(self):
        return {"error": self.code, "type": type(self).__name__, "message": str(self)}


class ContractError(StealthSimError, ValueError):
    code = "contract"


class NumericalBlowup(StealthSimError, FloatingPointError):
    code = "numerical_blowup"

    def __init__(self, message, step=None, where=None):
        super().__init__(message)
        self.step = step
        self.where = where


class EstimationError(StealthSimError):
    code = "estimation"


class NotReadyError(EstimationError):
    code = "not_ready"


class NoImpactfulDirection(StealthSimError):
    code = "no_impactful_direction"


class DetectorConfigError(StealthSimError, ValueError):
    code = "detector_config"


class CalibrationUnderpowered(StealthSimError):
    code = "calibration_underpowered"


class ModelBuildError(StealthSimError):
    code = "model_build"


class UnderpoweredProbe(StealthSimError):
    code = "underpowered_probe"


class ExperimentError(StealthSimError):
    code = "experiment"
