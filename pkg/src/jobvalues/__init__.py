"""Employer values from worker mobility, pay premiums and job-ad content."""

from .errors import (ConfigurationError, ContractError, DataError, IdentificationError, JobValuesError,
                     NumericalError)

__all__ = ["ConfigurationError", "ContractError", "DataError", "IdentificationError", "JobValuesError",
           "NumericalError"]
