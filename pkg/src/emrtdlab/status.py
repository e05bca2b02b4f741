"""Status words returned by the virtual card.

This table is the error ABI between card, terminal, relay and fuzz harness.
"""

SUCCESS = 0x9000
VERIFICATION_FAILED = 0x6300
WRONG_LENGTH = 0x6700
SM_MISSING = 0x6987
SM_OBJECT_ERROR = 0x6988
ACCESS_DENIED = 0x6982
BLOCKED = 0x6983
CONDITIONS_NOT_SATISFIED = 0x6985
WRONG_DATA = 0x6A80
FILE_NOT_FOUND = 0x6A82
WRONG_P1P2 = 0x6A86
WRONG_OFFSET = 0x6B00
INS_NOT_SUPPORTED = 0x6D00
CLA_NOT_SUPPORTED = 0x6E00


def retries_left(n: int) -> int:
    """Warning word 63CX carrying the remaining retry count."""
    return 0x63C0 | (n & 0x0F)


def is_retry_warning(sw: int) -> bool:
    return sw & 0xFFF0 == 0x63C0


NAMES = {
    SUCCESS: "success",
    VERIFICATION_FAILED: "verification failed",
    WRONG_LENGTH: "wrong length",
    SM_MISSING: "expected secure messaging objects missing",
    SM_OBJECT_ERROR: "incorrect secure messaging objects",
    ACCESS_DENIED: "security status not satisfied",
    BLOCKED: "authentication method blocked",
    CONDITIONS_NOT_SATISFIED: "conditions of use not satisfied",
    WRONG_DATA: "incorrect data",
    FILE_NOT_FOUND: "file not found",
    WRONG_P1P2: "incorrect P1/P2",
    WRONG_OFFSET: "offset outside file",
    INS_NOT_SUPPORTED: "instruction not supported",
    CLA_NOT_SUPPORTED: "class not supported",
}


def describe(sw: int) -> str:
    if is_retry_warning(sw):
        return f"verification failed, {sw & 0x0F} tries left"
    return NAMES.get(sw, "unknown status")
