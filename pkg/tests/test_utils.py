import pandas as pd

from rtwin.utils import default_threads, frame_table, get_rtwin_version, resolve_threads, system_summary


def test_long_frames_are_elided_around_an_ellipsis_row():
    frame = pd.DataFrame({"t": range(100), "u": [0.5] * 100})
    table = frame_table(frame, title="Trajectory", max_rows=10)
    assert table.row_count == 11
    assert [column.header for column in table.columns] == ["t", "u"]
    assert frame_table(frame.head(5)).row_count == 5


def test_thread_resolution():
    assert resolve_threads(3) == 3
    assert resolve_threads(0) == default_threads() >= 1


def test_version_and_summary():
    assert get_rtwin_version()
    assert get_rtwin_version() in system_summary()
