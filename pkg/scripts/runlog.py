"""运行日志与原子写入工具

所有脚本共用：log() 同时输出到终端（rich）和本次运行的日志文件，
atomic_write_* 采用 tmp → fsync → replace，防止中断导致结果文件损坏。
"""
import csv
import io
import json
import os
import tempfile
from datetime import datetime
from pathlib import Path

from rich.console import Console

RUN_ID = datetime.now().strftime("%Y%m%d_%H%M%S")
LOG_PATH = None
VERBOSE = False

_console = Console(stderr=True, highlight=False)

_LEVEL_STYLE = {
    "INFO": "",
    "WARN": "yellow",
    "ERROR": "bold red",
    "DEBUG": "dim",
}


def configure(log_dir=None, verbose=False):
    """Enable the per-run log file under log_dir (logs/run_<RUN_ID>.log)."""
    global LOG_PATH, VERBOSE
    VERBOSE = verbose
    if log_dir is None:
        LOG_PATH = None
        return None
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    LOG_PATH = log_dir / f"run_{RUN_ID}.log"
    return LOG_PATH


# ── Logging ──
def log(msg, level="INFO"):
    if level == "DEBUG" and not VERBOSE:
        return
    ts = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    line = f"[{ts}] [{level}] {msg}"
    _console.print(line, style=_LEVEL_STYLE.get(level, ""), markup=False)
    if LOG_PATH is not None:
        with open(LOG_PATH, "a") as f:
            f.write(line + "\n")


def console():
    return _console


# ── Atomic writes ──
def atomic_write_text(path, text, mode=0o644):
    """Atomic text write: tmp → fsync → replace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = tempfile.NamedTemporaryFile(
        mode="w", dir=path.parent, suffix=".tmp", delete=False, prefix=".", newline=""
    )
    try:
        fd.write(text)
        fd.flush()
        os.fsync(fd.fileno())
        fd.close()
        os.chmod(fd.name, mode)
        os.replace(fd.name, path)
    except Exception:
        fd.close()
        try:
            os.unlink(fd.name)
        except OSError:
            pass
        raise


def atomic_write_json(path, data, mode=0o644):
    atomic_write_text(path, json.dumps(data, ensure_ascii=False, indent=2) + "\n", mode)


def format_value(value):
    """CSV cell: floats at full precision, everything else via str()."""
    if isinstance(value, float):
        return format(value, ".17g")
    if value is None:
        return ""
    return str(value)


def atomic_write_csv(path, columns, rows):
    """Header row + rows (dicts) in the fixed column order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row.get(c)) for c in columns])
    atomic_write_text(path, buf.getvalue())
