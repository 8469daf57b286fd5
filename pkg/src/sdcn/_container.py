"""Binary container shared by model (``SDCN``) and cube (``DCUB``) files.

Layout, all integers little-endian::

    magic      4 bytes
    version    u16
    hdr_len    u32
    header     hdr_len bytes of UTF-8 JSON
    payload    raw bytes whose size is derived from the header
    crc32      u32 over every preceding byte
"""

import json
import struct
import zlib

from sdcn.errors import (
    BadMagicError,
    ChecksumError,
    FormatError,
    TruncatedFileError,
    VersionError,
)

_PREFIX = struct.Struct("<4sHI")


def pack(magic: bytes, version: int, header: dict, payload: bytes) -> bytes:
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(magic, version, len(hdr)) + hdr + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _crc_ok(buf: bytes) -> bool:
    if len(buf) < 4:
        return False
    (stored,) = struct.unpack("<I", buf[-4:])
    return stored == (zlib.crc32(buf[:-4]) & 0xFFFFFFFF)


def unpack(buf: bytes, magic: bytes, version: int, payload_size):
    """Validate ``buf`` and return ``(header, payload)``.

    ``payload_size`` maps the decoded header to the expected payload byte
    count; it may raise its own errors for invalid header values.
    """
    if len(buf) < _PREFIX.size:
        raise TruncatedFileError(f"file too short ({len(buf)} bytes) for a {magic!r} header")
    found_magic, found_version, hdr_len = _PREFIX.unpack_from(buf)
    if found_magic != magic:
        raise BadMagicError(f"bad magic {found_magic!r}, expected {magic!r}")
    if found_version != version:
        raise VersionError(found_version, version)
    start = _PREFIX.size
    if len(buf) < start + hdr_len + 4:
        raise TruncatedFileError("file ends inside the JSON header")
    try:
        header = json.loads(buf[start:start + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        if not _crc_ok(buf):
            raise ChecksumError("CRC32 mismatch (header corrupted)") from exc
        raise FormatError(f"unreadable JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("JSON header is not an object")
    size = payload_size(header)
    expected = start + hdr_len + size + 4
    if len(buf) < expected:
        raise TruncatedFileError(f"payload truncated: {len(buf)} bytes, expected {expected}")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after checksum")
    if not _crc_ok(buf):
        raise ChecksumError("CRC32 mismatch")
    return header, buf[start + hdr_len:start + hdr_len + size]
