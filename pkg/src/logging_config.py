import logging
import os
from logging.handlers import RotatingFileHandler
from src import config

LOGGER_NAME = "dynmap"


def setup_logging(name: str = LOGGER_NAME) -> logging.Logger:
    """
    Configures the pipeline logger: console plus a rotating file.

    Records carry the thread name because pair work runs on a thread pool.
    """
    log_dir = os.path.dirname(config.LOG_FILE_PATH)
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)

    logger = logging.getLogger(name)
    logger.setLevel(config.LOG_LEVEL)
    logger.propagate = False

    # Drop handlers from an earlier setup so records are not emitted twice
    if logger.hasHandlers():
        logger.handlers.clear()

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(threadName)s - %(levelname)s - %(message)s'
    )

    # Console level is set apart from the file level
    console = logging.StreamHandler()
    console.setLevel(config.CONSOLE_LOG_LEVEL)
    console.setFormatter(formatter)
    logger.addHandler(console)

    file_handler = RotatingFileHandler(
        config.LOG_FILE_PATH,
        maxBytes=10*1024*1024, # 10 MB
        backupCount=5
    )
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    return logger

# Initialize the logger for the application
logger = setup_logging()
