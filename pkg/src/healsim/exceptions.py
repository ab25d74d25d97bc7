class HealsimException(Exception):
    pass


class HealsimConfigError(HealsimException):
    pass


class HealsimShapeError(HealsimException):
    pass


class HealsimPreconditionError(HealsimException):
    pass


class HealsimParseError(HealsimException):
    def __init__(self, message: str, row: int, column: int) -> None:
        super().__init__(f'{message} (row {row}, column {column})')
        self.row = row
        self.column = column


class HealsimOutputError(HealsimException):
    pass
