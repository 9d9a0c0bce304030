import importlib.metadata
import platform

import psutil

from rtwin.settings.export_config import read_pyproject_toml


def get_python_version() -> str:
    return platform.python_version()


def get_os_version() -> str:
    return platform.platform()


def default_threads() -> int:
    """
    One worker per physical core; falls back to logical cores, then 1.

    Returns:
        int: thread count used when --threads / RTWIN_THREADS is 0.
    """
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


def resolve_threads(requested: int) -> int:
    return requested if requested and requested > 0 else default_threads()


def get_rtwin_version() -> str:
    """
    Installed package version, or the pyproject version for a source checkout.
    """
    try:
        return importlib.metadata.version("rtwin")
    except importlib.metadata.PackageNotFoundError:
        return read_pyproject_toml()["version"]


def system_summary() -> str:
    ram = psutil.virtual_memory()
    return (
        f"rtwin {get_rtwin_version()} on Python {get_python_version()} ({get_os_version()}), "
        f"{default_threads()} physical cores, {ram.available / 2**30:.1f} GB RAM available"
    )
