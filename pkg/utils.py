import os
import csv
import numbers
import tempfile
import logging
import logging.handlers # For file logging

# --- Logging Setup ---
LOG_FILENAME = 'run.log'
LOG_LEVEL = logging.INFO # Default level
LOG_FORMAT = '%(asctime)s - %(levelname)s - [%(module)s.%(funcName)s:%(lineno)d] - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logging(log_file=None, level=LOG_LEVEL):
    """Configures the root logger for the application.

    Logs to the console always and, when ``log_file`` is given, to a rotating
    file as well. Calling it again replaces the previous handlers, so a CLI
    invocation that changes output directory does not log twice.
    """
    handlers = [logging.StreamHandler()] # Log to console by default

    if log_file:
        try:
            os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
            # Use RotatingFileHandler to limit log file size
            file_handler = logging.handlers.RotatingFileHandler(
                log_file, maxBytes=5*1024*1024, backupCount=3, encoding='utf-8'
            )
            file_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
            handlers.append(file_handler)
        except OSError as e:
            logging.warning(f"Error setting up file logging at '{log_file}': {e}")

    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=DATE_FORMAT, handlers=handlers, force=True)
    logging.debug(f"Logging configured (file: {os.path.abspath(log_file) if log_file else 'none'}).")


# --- Exceptions ---
class CalibrateMixError(Exception):
    """Base exception for all laboratory errors."""
    pass

class DimensionError(CalibrateMixError):
    """Vector/matrix shapes or lengths do not agree."""
    pass

class NumericError(CalibrateMixError):
    """Non-finite input or intermediate value."""
    pass

class ParameterError(CalibrateMixError):
    """A hyperparameter or generator argument is outside its valid range."""
    pass

class DomainError(CalibrateMixError):
    """An operation was asked to work on an empty or otherwise unsupported input."""
    pass

class SampleLookupError(CalibrateMixError):
    """A sample id is not registered with a tracker."""
    pass

class UsageError(CalibrateMixError):
    """An API contract was violated (stale cache, non-monotone iteration, ...)."""
    pass

class FormatError(CalibrateMixError):
    """A file or serialized table is malformed."""
    pass

class ConfigError(CalibrateMixError):
    """The experiment configuration is invalid."""
    pass

class TrainingAbortedError(CalibrateMixError):
    """Training hit a non-finite loss and stopped."""

    def __init__(self, message, dump_path=None, history=None):
        super().__init__(message)
        self.dump_path = dump_path
        self.history = history or [] # metric rows logged before the abort


# --- Output helpers ---
def format_sig(value, digits=6):
    """Format a number with ``digits`` significant digits for CSV output.

    Integers are written as-is; ``None`` becomes an empty cell.
    """
    if value is None:
        return ""
    if isinstance(value, numbers.Integral) and not isinstance(value, bool):
        return str(value)
    return f"{float(value):.{digits}g}"


def default_file_mode():
    """Mode a plain open() would create a file with: 0o666 minus the process umask."""
    umask = os.umask(0)
    os.umask(umask)
    return 0o666 & ~umask


def publish_file(tmp_path, filepath):
    """Give a finished temp file the default file mode and rename it over ``filepath``."""
    os.chmod(tmp_path, default_file_mode())
    os.replace(tmp_path, filepath)


def atomic_write_csv(filepath, headers, rows):
    """
    Write rows (list of dicts) to a CSV file via a temp file and rename.
    Returns: str: The path written.
    Raises: FormatError: If the file cannot be written.
    """
    directory = os.path.dirname(os.path.abspath(filepath))
    os.makedirs(directory, exist_ok=True)
    tmp_path = None
    try:
        with tempfile.NamedTemporaryFile('w', newline='', encoding='utf-8', dir=directory,
                                         prefix='.tmp_', suffix='.csv', delete=False) as f:
            tmp_path = f.name
            writer = csv.DictWriter(f, fieldnames=headers, extrasaction='ignore', lineterminator='\n')
            writer.writeheader()
            for row in rows:
                writer.writerow({key: _csv_cell(row.get(key)) for key in headers})
        publish_file(tmp_path, filepath)
        logging.info(f"Wrote {len(rows)} rows to CSV: {filepath}")
        return filepath
    except OSError as e:
        logging.error(f"Failed to write CSV file '{filepath}': {e}")
        if tmp_path and os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise FormatError(f"Failed to write CSV '{filepath}': {e}") from e


def atomic_write_text(filepath, text):
    """Write a text file atomically (temp file + rename)."""
    directory = os.path.dirname(os.path.abspath(filepath))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp_')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8') as f:
            f.write(text)
        publish_file(tmp_path, filepath)
    except OSError as e:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise FormatError(f"Failed to write '{filepath}': {e}") from e
    return filepath


def _csv_cell(value):
    if isinstance(value, str):
        return value
    return format_sig(value)
