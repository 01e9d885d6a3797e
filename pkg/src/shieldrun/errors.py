"""Exception hierarchy shared by the runtime, shields and tensor engine."""


class ShieldRunError(Exception):
    """Base class for every error raised by this package."""


# enclave runtime
class ConfigInvalid(ShieldRunError):
    pass


class ParseError(ConfigInvalid):
    pass


class ModeUnknown(ConfigInvalid):
    pass


class AlreadyFinalized(ShieldRunError):
    pass


class OutOfBounds(ShieldRunError):
    pass


# syscall bridge
class QueueFull(ShieldRunError):
    pass


class IagoViolation(ShieldRunError):
    """A host response failed the boundary sanity checks and was dropped."""


class ShieldError(ShieldRunError):
    """Delivered to a waiting thread in place of a rejected host response."""


# scheduler
class Deadlock(ShieldRunError):
    pass


# fs shield
class TamperDetected(ShieldRunError):
    pass


class HeaderCorrupt(TamperDetected):
    pass


class KeyMissing(ShieldRunError):
    pass


# net shield
class ChannelError(ShieldRunError):
    pass


class AuthFailure(ChannelError):
    pass


class MeasurementMismatch(ChannelError):
    pass


class Downgrade(ChannelError):
    pass


class ReplayDetected(ChannelError):
    pass


class IntegrityFailure(ChannelError):
    pass


class ChannelClosed(ChannelError):
    pass


# attestation / CAS
class AttestationDenied(ShieldRunError):
    reason = "denied"


class SignatureInvalid(AttestationDenied):
    reason = "signature-invalid"


class NonceReused(AttestationDenied):
    reason = "nonce-reused"


class UnknownMeasurement(AttestationDenied):
    reason = "unknown-measurement"


class ProvisioningFailed(ShieldRunError):
    pass


# tensor engine
class TensorError(ShieldRunError):
    pass


class ShapeMismatch(TensorError):
    pass


class UnknownNode(TensorError):
    pass


class NonFinite(TensorError):
    pass


class GraphInvalid(TensorError):
    pass


class FormatVersionUnknown(TensorError):
    pass


class CorruptFile(TensorError):
    pass


class RecordTruncated(TensorError):
    pass


class LabelOutOfRange(TensorError):
    pass


class EndOfData(TensorError):
    """A record stream ran out of records."""


class QueueClosed(EndOfData):
    pass
