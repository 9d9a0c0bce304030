import pandas as pd
from rich.console import Console
from rich.table import Table

console = Console()


# Define a shorthand for console.print
def cprint(*args, **kwargs):
    return console.print(*args, **kwargs)


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def frame_table(frame: pd.DataFrame, title: str | None = None, max_rows: int = 40) -> Table:
    """
    Renders a DataFrame as a rich Table; longer frames show their first and
    last rows around an ellipsis row.
    """
    table = Table(title=title, header_style="bold cyan")
    for column in frame.columns:
        table.add_column(str(column), justify="right" if pd.api.types.is_numeric_dtype(frame[column]) else "left")
    rows = list(frame.itertuples(index=False))
    if len(rows) > max_rows:
        half = max_rows // 2
        rows = [*rows[:half], None, *rows[-half:]]
    for row in rows:
        if row is None:
            table.add_row(*("..." for _ in frame.columns))
        else:
            table.add_row(*(_cell(value) for value in row))
    return table


def print_frame(frame: pd.DataFrame, title: str | None = None):
    cprint(frame_table(frame, title))
