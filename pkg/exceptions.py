"""
Custom exceptions for the churn register simulator
"""


class SimulatorException(Exception):
    """Base exception for all simulator errors"""
    pass


class ValidationError(SimulatorException):
    """Exception raised for malformed user input"""
    pass


class ConfigurationError(SimulatorException):
    """Exception raised for configuration errors"""
    pass


class InfeasibleParametersError(SimulatorException):
    """Exception raised when a run is requested with parameters outside constraints (1)-(7)"""

    def __init__(self, message: str, failing: tuple = ()):
        super().__init__(message)
        self.failing = tuple(failing)


class ProtocolError(SimulatorException):
    """Exception raised when a node handler is driven outside its lifecycle"""
    pass


class ModelViolationError(SimulatorException):
    """Exception raised when a Byzantine emission breaks the signature model"""

    def __init__(self, message: str, rule: str, server: str = ""):
        super().__init__(f"rule ({rule}) violated by {server or 'unknown'}: {message}")
        self.rule = rule
        self.server = server


class ChurnModelError(SimulatorException):
    """Exception raised when a scheduled membership change would break A1"""
    pass


class TraceFormatError(SimulatorException):
    """Exception raised when a trace file cannot be parsed"""
    pass
