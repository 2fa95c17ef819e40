"""Byte-size parsing and formatting for CLI flags, spec files, and reports."""

import re

KIB = 1024
MIB = 1024 * 1024
GIB = 1024 * 1024 * 1024

_SUFFIXES = {
    "": 1,
    "b": 1,
    "k": KIB,
    "kb": KIB,
    "kib": KIB,
    "m": MIB,
    "mb": MIB,
    "mib": MIB,
    "g": GIB,
    "gb": GIB,
    "gib": GIB,
}

_SIZE_RE = re.compile(r"^\s*([0-9]+(?:\.[0-9]+)?)\s*([a-zA-Z]*)\s*$")


def parse_size(text):
    """Parse '4MiB', '256M', '1.5GB' or plain byte counts into an int.

    Binary units throughout: 1K = 1024.
    """
    if isinstance(text, int):
        return text
    m = _SIZE_RE.match(str(text))
    if not m:
        raise ValueError(f"unparseable size: {text!r}")
    value, suffix = m.groups()
    try:
        factor = _SUFFIXES[suffix.lower()]
    except KeyError:
        raise ValueError(f"unknown size suffix {suffix!r} in {text!r}") from None
    size = float(value) * factor
    if size != int(size):
        raise ValueError(f"size {text!r} is not a whole number of bytes")
    return int(size)


def format_size(n):
    """Render a byte count with a binary suffix, e.g. 41943040 -> '40.0MiB'."""
    for factor, suffix in ((GIB, "GiB"), (MIB, "MiB"), (KIB, "KiB")):
        if n >= factor:
            return f"{n / factor:.1f}{suffix}"
    return f"{n}B"


def format_rate(bytes_per_s):
    return format_size(int(bytes_per_s)) + "/s"
