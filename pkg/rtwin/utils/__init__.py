from rtwin.utils.formatter import cprint, frame_table, print_frame
from rtwin.utils.system_info import default_threads, get_rtwin_version, resolve_threads, system_summary

__all__ = [
    "cprint",
    "default_threads",
    "frame_table",
    "get_rtwin_version",
    "print_frame",
    "resolve_threads",
    "system_summary",
]
