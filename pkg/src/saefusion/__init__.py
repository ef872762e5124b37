"""Small-area estimation toolkit: direct estimates, block kriging, spatial FH and bootstrap."""

from importlib import metadata


def get_version() -> str:
    try:
        return metadata.version("saefusion")
    except metadata.PackageNotFoundError:
        return "0.0.0"


__all__ = ["get_version"]
