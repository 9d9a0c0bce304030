from rtwin.settings.config import *
from rtwin.settings.export_config import export_config, read_pyproject_toml
from rtwin.settings.loader import EngineConfig, import_config, parse_config

__all__ = [
    "EngineConfig",
    "export_config",
    "import_config",
    "parse_config",
    "read_pyproject_toml",
]
