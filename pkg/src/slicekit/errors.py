"""Exception hierarchy shared by every slicekit module.

Each class carries an ``exit_code`` so the CLI can map domain failures to
distinct process exit codes without a lookup table of its own.
"""


class SliceKitError(Exception):
    exit_code = 9


# -- model files / record files -------------------------------------------

class ParseError(SliceKitError):
    exit_code = 3

    def __init__(self, reason, line=None):
        self.line = line
        self.reason = reason
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{reason}")


class VersionMismatch(ParseError):
    pass


class MissingWeights(SliceKitError):
    exit_code = 3

    def __init__(self, layer_id):
        self.layer_id = layer_id
        super().__init__(f"no weights found for layer {layer_id}")


class UnknownSpec(SliceKitError):
    exit_code = 3


# -- shapes -----------------------------------------------------------------

class ShapeError(SliceKitError):
    exit_code = 4

    def __init__(self, layer_id, expected, actual):
        self.layer_id = layer_id
        self.expected = expected
        self.actual = actual
        super().__init__(f"layer {layer_id}: expected {expected}, got {actual}")


class ShapeMismatch(ShapeError):
    pass


class OddSpatialDims(ShapeError):
    def __init__(self, shape):
        super().__init__("transfer-layer", "even height and width", shape)


# -- splitting --------------------------------------------------------------

class InvalidSplit(SliceKitError):
    exit_code = 5


class NotTlEligible(InvalidSplit):
    pass


class SplitMismatch(InvalidSplit):
    pass


class NoFeasiblePlan(SliceKitError):
    exit_code = 6


# -- training ---------------------------------------------------------------

class DivergedLoss(SliceKitError):
    exit_code = 9

    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"loss diverged at epoch {epoch}: {loss}")


# -- benchmarking -----------------------------------------------------------

class ClockError(SliceKitError):
    exit_code = 9


# -- wire / runtime -----------------------------------------------------------

class WireError(SliceKitError):
    exit_code = 7
    # True when the whole frame was consumed, so the stream is still aligned
    recoverable = False


class BadMagic(WireError):
    pass


class UnsupportedVersion(WireError):
    pass


class TruncatedFrame(WireError):
    pass


class PayloadLengthMismatch(WireError):
    pass


class UnknownFrameType(WireError):
    pass


class BadPayload(WireError):
    pass


class BadModelId(WireError):
    pass


class OversizedModelId(BadModelId):
    pass


class ServerError(SliceKitError):
    exit_code = 7

    def __init__(self, reason, detail=""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


class ConnectionClosed(SliceKitError):
    exit_code = 8


class Timeout(SliceKitError):
    exit_code = 8


class BindError(SliceKitError):
    exit_code = 8
