"""Various helpers for other modules."""

import hashlib
import logging
from dataclasses import dataclass


@dataclass
class Edges:
    """Dataclass for containing width and height of a drawing area."""

    width: int
    height: int


def derive_seed(master: int, *keys) -> int:
    """Derive a child seed from a master seed and a key path.

    The derivation only depends on its arguments, so a cell or a session gets
    the same seed no matter in which order or in which process it is built.

    Parameters
    ----------
    master : int
        Master seed of the invocation.
    *keys
        Path of the child, e.g. ``("session", "P01", "2648", 3)``.

    Returns
    -------
    int
        Seed in ``[0, 2**32)``.
    """
    path = "/".join([str(int(master))] + [str(key) for key in keys])
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def configure_logging(level: str = "INFO") -> None:
    """Configure the root logger for command-line runs.

    Parameters
    ----------
    level : str, optional
        Name of the logging level, by default "INFO".
    """
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
