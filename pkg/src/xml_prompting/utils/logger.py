import datetime
import inspect
import json
import logging
import logging.handlers
import os
import sys
import threading
from time import time
from typing import Dict, List, Optional

from .colors import color

LOGGER_NAME = "xml_prompting"

LOGGER_LEVEL_COLORS = {
    "TRACE": color.bold(color.cyan("TRACE")),
    "RUNNING": color.bold(color.purple("RUNNI")),
    "DEBUG": color.bold(color.cyan("DEBUG")),
    "INFO": color.bold(color.white("INFO ")),
    "DONE": color.bold(color.green("DONE ")),
    "COMPLETED": color.bold(color.bg_green("COMPL")),
    "WARNING": color.bold(color.orange("WARN ")),
    "ERROR": color.bold(color.red("ERROR")),
    "FAILED": color.bold(color.italic(color.red("FAIL "))),
    "CRITICAL": color.bold(color.bg_light_red("CRITI")),
}

LOGGER_LEVELS = {
    "TRACE": logging.DEBUG - 1,
    "DEBUG": logging.DEBUG,
    "INFO": logging.INFO,
    "DONE": logging.INFO + 1,
    "RUNNING": logging.INFO + 2,
    "COMPLETED": logging.INFO + 3,
    "WARNING": logging.WARNING,
    "ERROR": logging.ERROR,
    "FAILED": logging.ERROR + 1,
    "CRITICAL": logging.CRITICAL,
}

for __name, __value in LOGGER_LEVELS.items():
    if logging.getLevelName(__value) != __name:
        logging.addLevelName(__value, __name)


def format_elapsed_time(start_time: float, end_time: float) -> str:
    """Function to format elapsed time in <h>h, <m>min, <s>s, <ms>ms

    Args:
        start_time (float): Start time in epoch format
        end_time (float): Finish time in epoch format

    Returns:
        str: Formatted elapsed time
    """
    elapsed_time = end_time - start_time
    result = ""
    hours = int(elapsed_time // 3600)
    if hours > 0:
        result += f"{hours}h, "
    elapsed_time %= 3600
    minutes = int(elapsed_time // 60)
    if minutes > 0:
        result += f"{minutes}min, "
    elapsed_time %= 60
    seconds = int(elapsed_time)
    if seconds > 0:
        result += f"{seconds}s, "
    milliseconds = int((elapsed_time - int(elapsed_time)) * 1000)
    if milliseconds > 0 or not result:
        result += f"{milliseconds}ms"
    return result.rstrip(", ")


class LoggerFormatter(logging.Formatter):
    """
    Formatter rendering date, environment, level badge and source location.

    Nested sections opened with ``start_sub`` and closed with ``end_sub``
    are drawn with box prefixes when colors are enabled.

    Attributes:
        colors (bool): Whether to use ANSI colors
        flags (Dict[str, bool]): Which prefix parts to show (date, env, level, file)
    """

    START_PREFIX = "╭○ "
    END_PREFIX = "╰● "
    NEST_PREFIX = "│ "

    def __init__(self, colors: bool = True, flags: Optional[Dict[str, bool]] = None):
        super().__init__()
        self.colors = colors
        self.flags = dict(flags or {"date": True, "env": True, "level": True, "file": True})
        self.__depth__ = 0
        self.__lock__ = threading.Lock()

    def __paint__(self, line: str, record: logging.LogRecord, bold: bool) -> str:
        if bold:
            line = color.bold(line)
        if record.levelname == "COMPLETED":
            line = color.green(line)
        elif record.levelname in ("FAILED", "ERROR"):
            line = color.red(line)
        return line

    def __nest__(self, record: logging.LogRecord) -> str:
        start = getattr(record, "start_sub", False)
        end = getattr(record, "end_sub", False)
        with self.__lock__:
            if start:
                prefix = self.NEST_PREFIX * self.__depth__ + self.START_PREFIX
                self.__depth__ += 1
            elif end and self.__depth__ > 0:
                self.__depth__ -= 1
                prefix = self.NEST_PREFIX * self.__depth__ + self.END_PREFIX
            else:
                prefix = self.NEST_PREFIX * self.__depth__
        return prefix

    def format(self, record: logging.LogRecord) -> str:
        msg = record.getMessage()
        env = getattr(record, "env", LOGGER_NAME)
        timestamp = datetime.datetime.fromtimestamp(record.created).isoformat(
            timespec="milliseconds"
        )
        prefix: List[str] = []
        if self.colors:
            nest = self.__nest__(record)
            bold = getattr(record, "start_sub", False) or getattr(record, "end_sub", False)
            if self.flags.get("date"):
                prefix.append(color.dark_blue(timestamp))
            if self.flags.get("env"):
                prefix.append(color.purple(f"({env})"))
            if self.flags.get("level"):
                prefix.append(
                    LOGGER_LEVEL_COLORS.get(record.levelname, color.bold(record.levelname))
                )
            if self.flags.get("file"):
                prefix.append(
                    f"{color.dark_green(record.filename)}{color.orange(':')}"
                    f"{color.dark_green(str(record.lineno))}"
                )
            head = " ".join(prefix)
            return "\n".join(
                f"{head} {nest}{self.__paint__(line, record, bold)}"
                for line in (msg.splitlines() or [""])
            )
        if self.flags.get("date"):
            prefix.append(timestamp)
        if self.flags.get("env"):
            prefix.append(f"({env})")
        if self.flags.get("level"):
            prefix.append(f"{record.levelname:9s}")
        if self.flags.get("file"):
            prefix.append(f"{record.filename}:{record.lineno}")
        return " ".join(prefix) + f" | {msg}"


class Logger:
    """Package logger with custom levels and timed tasks.

    Records go to stderr so command output on stdout stays machine readable.
    """

    def __init__(
        self,
        env: str,
        log_file: Optional[str] = None,
        max_log_size_mb: int = 10,
        backup_count: int = 5,
        colors: Optional[bool] = None,
        level: str = "WARNING",
    ):
        self.env = env
        self.v_separator = " "
        self.flags = {"file": True, "date": True, "env": True, "level": True}
        self.__tasks__: Dict[int, Dict] = {}
        self.__total_tasks__ = 0
        self.__tasks_lock__ = threading.Lock()
        self.__log_file__ = log_file
        self.__max_log_size__ = max_log_size_mb
        self.__backup_count__ = backup_count
        if colors is None:
            colors = sys.stderr.isatty() or bool(os.environ.get("FORCE_COLOR"))
        self.__enable_colors__ = colors

        self.logger = logging.getLogger(LOGGER_NAME)
        self.logger.setLevel(LOGGER_LEVELS["TRACE"])
        self.logger.propagate = False
        self.console_handler: Optional[logging.Handler] = None
        self.file_handler: Optional[logging.Handler] = None
        self.__console_level__ = LOGGER_LEVELS.get(level.upper(), logging.WARNING)
        self.__custom_formatters__()

    def __custom_formatters__(self):
        if self.console_handler is not None:
            self.logger.removeHandler(self.console_handler)
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(LoggerFormatter(self.__enable_colors__, self.flags))
        console_handler.setLevel(self.__console_level__)
        self.console_handler = console_handler
        self.logger.addHandler(console_handler)

        if self.__log_file__:
            if self.file_handler is not None:
                self.logger.removeHandler(self.file_handler)
            file_handler = logging.handlers.RotatingFileHandler(
                self.__log_file__,
                maxBytes=self.__max_log_size__ * 1024 * 1024,
                backupCount=self.__backup_count__,
                encoding="utf-8",
                delay=True,
            )
            file_handler.setFormatter(LoggerFormatter(False, self.flags))
            file_handler.setLevel(LOGGER_LEVELS["TRACE"])
            self.file_handler = file_handler
            self.logger.addHandler(file_handler)

    def __get_message__(self, *messages) -> str:
        res = []
        for msg in messages:
            if isinstance(msg, (dict, list)):
                res.append(json.dumps(msg, default=str))
            else:
                res.append(str(msg))
        return self.v_separator.join(res)

    def set_env(self, env: str):
        self.env = env

    def set_level(self, level: str):
        """Set the logging level for the console handler."""
        level = level.upper()
        if level not in LOGGER_LEVELS:
            raise ValueError(f"Invalid log level: {level}")
        self.__console_level__ = LOGGER_LEVELS[level]
        if self.console_handler is not None:
            self.console_handler.setLevel(self.__console_level__)

    def log(
        self,
        level: str,
        *messages,
        frame=None,
        start_sub=False,
        end_sub=False,
    ):
        """Logs a message at the specified level."""
        level_value = LOGGER_LEVELS.get(level.upper())
        if level_value is None:
            raise ValueError(f"Invalid log level: {level}")
        if level_value < self.__console_level__ and self.file_handler is None:
            return
        if frame is None:
            frame = inspect.currentframe().f_back.f_back
        filename = (
            "/".join(frame.f_code.co_filename.split(os.sep)[-2:]) if frame else "unknown"
        )
        line = frame.f_lineno if frame else 0
        record = self.logger.makeRecord(
            self.logger.name,
            level_value,
            filename,
            line,
            self.__get_message__(*messages),
            None,
            None,
            extra={"env": self.env, "start_sub": start_sub, "end_sub": end_sub},
        )
        record.filename = filename
        self.logger.handle(record)

    def trace(self, *messages, start_sub=False, end_sub=False):
        self.log("TRACE", *messages, start_sub=start_sub, end_sub=end_sub)

    def debug(self, *messages, start_sub=False, end_sub=False):
        self.log("DEBUG", *messages, start_sub=start_sub, end_sub=end_sub)

    def info(self, *messages, start_sub=False, end_sub=False):
        self.log("INFO", *messages, start_sub=start_sub, end_sub=end_sub)

    def done(self, *messages, start_sub=False, end_sub=False):
        self.log("DONE", *messages, start_sub=start_sub, end_sub=end_sub)

    def warn(self, *messages, start_sub=False, end_sub=False):
        self.log("WARNING", *messages, start_sub=start_sub, end_sub=end_sub)

    def start(self, *messages) -> int:
        """Opens a timed task and returns its id for ``finish``."""
        message = self.__get_message__(*messages)
        with self.__tasks_lock__:
            self.__total_tasks__ += 1
            task_id = self.__total_tasks__
            self.__tasks__[task_id] = {"message": message, "start_time": time()}
        self.log("RUNNING", f">> {message}", frame=inspect.currentframe().f_back, start_sub=True)
        return task_id

    def finish(self, task_id: int, *messages, success: bool = True):
        """Closes a task opened with ``start`` and logs its elapsed time."""
        with self.__tasks_lock__:
            task = self.__tasks__.pop(task_id, None)
        if task is None:
            return
        message = self.__get_message__(*messages)
        postfix = f" {message}" if message.strip() else ""
        elapsed = format_elapsed_time(task["start_time"], time())
        self.log(
            "COMPLETED" if success else "FAILED",
            f"{task['message']} ({elapsed}){postfix}",
            frame=inspect.currentframe().f_back,
            end_sub=True,
        )


log = Logger(
    "xml-prompting",
    log_file=os.environ.get("XMLPROMPT_LOG_FILE") or None,
    level=os.environ.get("XMLPROMPT_LOG_LEVEL", "WARNING"),
)
