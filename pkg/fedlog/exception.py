"""Base classes for fedlog exceptions.
"""

class FedLogException(Exception):
    """Base class for fedlog exceptions."""


class ConfigError(FedLogException):
    """Indicates an invalid configuration or a dimension mismatch.
    
    Attributes:
        errors: Every violated field, one message each.
    """
    def __init__(self, message: str, errors: 'list[str]|None' = None) -> None:
        self.errors: 'list[str]' = list(errors or [message])
        super().__init__(message)


class InputError(FedLogException):
    """Indicates caller supplied data outside the valid domain."""


class ProtocolError(FedLogException):
    """Indicates a client message or model that does not fit the federation.
    
    Attributes:
        client_id: The offending client, if known.
    """
    def __init__(self, message: str, client_id: 'int|None' = None) -> None:
        self.client_id = client_id
        if client_id is not None:
            message = f'client {client_id}: {message}'
        super().__init__(message)


class IdxParseError(FedLogException):
    """Indicates a malformed IDX stream.
    
    Attributes:
        offset: Byte offset where parsing failed.
    """
    def __init__(self, message: str, offset: int) -> None:
        self.offset = offset
        super().__init__(f'{message} (offset {offset})')


class CrcError(FedLogException):
    """Indicates a detected CRC mismatch on a dumped message frame."""
