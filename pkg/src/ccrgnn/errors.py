# Copyright (c) 2021 Leiden University Medical Center
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in
# all copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.

"""Exceptions raised by ccrgnn.

Every class also derives from the builtin exception that best describes it,
so ``except ValueError`` keeps working for callers that do not care about
the details."""

from typing import Optional

__all__ = ["CcrGnnError", "ContractViolation", "ConfigError", "DataError",
           "ParseError", "ValidationError", "SchemaError", "EncodingError",
           "RebalanceError", "TrainingError", "GradientCheckError",
           "CheckpointError"]


class CcrGnnError(Exception):
    pass


class ContractViolation(CcrGnnError, ValueError):
    """A function was called with arguments that break its contract, for
    instance matrices with non-conforming shapes."""


class ConfigError(CcrGnnError, ValueError):
    pass


class DataError(CcrGnnError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, row: Optional[int] = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ValidationError(DataError):
    pass


class SchemaError(DataError):
    pass


class EncodingError(DataError):
    pass


class RebalanceError(DataError):
    pass


class TrainingError(CcrGnnError, RuntimeError):
    pass


class GradientCheckError(CcrGnnError, ArithmeticError):
    pass


class CheckpointError(CcrGnnError, OSError):
    pass
