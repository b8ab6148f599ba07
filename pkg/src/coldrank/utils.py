# ===== IMPORTS =====
# === Standard library ===
import json
import logging
import pathlib
import random

# === Thirdparty ===
import numpy as np
import torch


# ===== GLOBALS =====
logger = logging.getLogger(__name__)


# ===== CLASSES =====
class JsonLinesWriter:
    """Appends one JSON document per line, flushing after every record."""

    def __init__(self, path):
        self._path = pathlib.Path(path) if path is not None else None
        self._file = None
        if self._path is not None:
            mkdirs(files=[self._path])
            self._file = self._path.open('w', encoding='utf8')

    def write(self, record):
        if self._file is None:
            return
        self._file.write(json.dumps(record, sort_keys=True) + '\n')
        self._file.flush()

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ===== FUNCTIONS =====
def setup_logging(level=logging.INFO):
    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    LOG_FORMAT = '[{asctime}][{levelname}][{name}:{lineno}] {message}'
    DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
    formatter = logging.Formatter(
        fmt=LOG_FORMAT, datefmt=DATE_FORMAT, style='{')
    for handler in [h for h in root_logger.handlers if getattr(h, '_coldrank', False)]:
        root_logger.removeHandler(handler)
    stream_handler = logging.StreamHandler()
    stream_handler._coldrank = True
    stream_handler.setFormatter(formatter)
    root_logger.addHandler(stream_handler)
    logger.info('Root logger is configured')


def mkdirs(files=(), folders=()):
    for file_ in files:
        pathlib.Path(file_).parent.mkdir(parents=True, exist_ok=True)
    for folder in folders:
        pathlib.Path(folder).mkdir(parents=True, exist_ok=True)


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def write_json(path, document):
    path = pathlib.Path(path)
    mkdirs(files=[path])
    logger.info('Saving JSON report into \'%s\'', path)
    path.write_text(json.dumps(document, indent=4))


def write_text(path, text):
    path = pathlib.Path(path)
    mkdirs(files=[path])
    logger.info('Saving table into \'%s\'', path)
    path.write_text(text)
