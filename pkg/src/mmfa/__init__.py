"""Multimodal (RGB + point cloud) feature adaptation for anomaly detection."""
from .errors import (ConfigurationError, ContractError, DegenerateInputError, EmptyBankError,
                     FormatError, MMFAError, NumericalDegeneracyError, SampleNotFoundError,
                     TrainingDivergedError, UndefinedMetricError, UserError)

__version__ = "0.1.0"
