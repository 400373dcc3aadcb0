import logging
import os
from datetime import date, datetime
from pathlib import Path

import pytz


class CustomFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        filename = record.filename.rsplit(".", maxsplit=1)[0]
        record.file_line = f"{filename}:{record.lineno}".ljust(18)
        return super().format(record)


def local_now() -> datetime:
    return datetime.now(pytz.timezone(os.environ.get("TMSIM_TZ", "UTC")))


def setup_logger(
    _today: date | None = None,
    log_folder: Path | None = None,
    level: int = logging.DEBUG,
) -> None:
    log_format = "[%(asctime)s] %(levelname)-5s %(file_line)s %(message)s"
    formatter = CustomFormatter(log_format, datefmt="%H:%M:%S")

    tmsim = logging.getLogger("TMSIM")
    tmsim.setLevel(level)

    formatter.converter = lambda *args: local_now().timetuple()

    for handler in list(tmsim.handlers):
        tmsim.removeHandler(handler)
        handler.close()

    stream_handler = logging.StreamHandler()
    stream_handler.setLevel(level)
    stream_handler.setFormatter(formatter)
    tmsim.addHandler(stream_handler)

    if log_folder is None:
        return

    if _today is None:
        _today = local_now().date()

    today_str = _today.strftime("%d.%m.%y")
    year_month_folder = log_folder / _today.strftime("%Y/%B")
    year_month_folder.mkdir(parents=True, exist_ok=True)
    logger_file = year_month_folder / f"{today_str}.log"

    file_handler = logging.FileHandler(logger_file, encoding="utf-8")
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(formatter)
    tmsim.addHandler(file_handler)


def prettify_bytes(n: float) -> str:
    for unit in ("B", "KB", "MB", "GB"):
        if abs(n) < 1000 or unit == "GB":
            break
        n /= 1000
    return f"{n:,.2f}".replace(",", " ") + f" {unit}"


def prettify_ns(ns: float) -> str:
    if ns >= 1_000_000:
        return f"{ns / 1_000_000:,.3f} ms".replace(",", " ")
    if ns >= 1_000:
        return f"{ns / 1_000:,.3f} us".replace(",", " ")
    return f"{ns:.0f} ns"
