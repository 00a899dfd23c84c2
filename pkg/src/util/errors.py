# -*- encoding: utf-8 -*-
# util/errors.py
# Exceptions raised across the staging suite. Every class carries the wire
# status code it is reported with (see apis/protocol.py::Status).

STATUS_OK = 0
STATUS_CAPACITY = 1
STATUS_DUPLICATE_NAME = 2
STATUS_PROTOCOL_VIOLATION = 3
STATUS_CHECKSUM_MISMATCH = 4
STATUS_INTERNAL = 5


class StagingError(Exception):
    """Base class for every error of the staging suite."""

    status = STATUS_INTERNAL


class ArgumentError(StagingError, ValueError):
    pass


class NotFoundError(StagingError, KeyError):

    def __str__(self) -> str:
        return Exception.__str__(self)


class ResourceError(StagingError):
    pass


###############################
#     Transport errors        #
###############################

class TransportError(StagingError):
    pass


class ConnectError(TransportError):
    pass


class ConnectTimeout(TransportError):
    pass


class ChannelClosed(TransportError):
    pass


class ReceiveTimeout(TransportError):
    pass


class MessageSizeError(TransportError):
    pass


class AccessError(TransportError):
    """Remote write with a bad key or against a deregistered region."""

    code = 'access'


class BoundsError(TransportError):
    """Remote write past the end of a region."""

    code = 'bounds'


###############################
#     Codec errors            #
###############################

class EncodeError(StagingError):
    pass


class DecodeError(StagingError):

    def __init__(self, message, offset):
        super().__init__(f'{message} (at byte offset {offset})')
        self.offset = offset


###############################
#     Protocol / store errors #
###############################

class ProtocolViolation(StagingError):

    status = STATUS_PROTOCOL_VIOLATION


class CapacityError(StagingError):

    status = STATUS_CAPACITY


class DuplicateNameError(StagingError):

    status = STATUS_DUPLICATE_NAME


class ChecksumMismatch(StagingError):

    status = STATUS_CHECKSUM_MISMATCH


class OpenError(TransportError):
    pass


class ForwardError(StagingError):
    """The sink refused or lost a LOAD."""


class StartupError(StagingError):
    pass


class BenchError(StagingError):

    def __init__(self, message, trial=None):
        super().__init__(message if trial is None else f'{message} [trial {trial}]')
        self.trial = trial
