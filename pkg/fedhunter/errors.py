# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Every user-facing failure raised by fedhunter derives from FedHunterError. The
# exit_code attribute is what the command line returns when the error escapes.


class FedHunterError(Exception):
    exit_code = 1


class ConfigError(FedHunterError):
    exit_code = 2


class DataError(FedHunterError):
    exit_code = 3


class SchemaError(DataError):
    pass


class FeatureRangeError(DataError):
    def __init__(self, feature, value, message=None):
        self.feature = feature
        self.value = value
        super().__init__(
            message or f"value {value} out of range for feature {feature}"
        )


class RowError(DataError):
    def __init__(self, line, column, message):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class TemplateError(DataError):
    def __init__(self, entity_type, key):
        self.entity_type = entity_type
        self.key = key
        super().__init__(f"{entity_type} sentence pattern needs attribute '{key}'")


class GraphError(DataError):
    pass


class DimensionError(DataError):
    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected shape {expected}, got {actual}")


class CapacityError(DataError):
    pass


class KindError(DataError):
    pass


class CheckpointError(DataError):
    pass


class TrainingError(FedHunterError):
    exit_code = 4

    def __init__(self, message, epoch=None, client_id=None, round_index=None):
        self.epoch = epoch
        self.client_id = client_id
        self.round_index = round_index
        super().__init__(message)


class StaleDatasetError(FedHunterError):
    exit_code = 5


# Raised on API misuse, e.g. backpropagating through a cache whose model changed
class ContractError(FedHunterError):
    pass
