import os
import logging
from datetime import datetime

from utils.constants import LOG_DIR

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logging(process_name, log_dir=LOG_DIR, level=logging.INFO):
    """
    Configure the root logger with a timestamped file handler and a console handler.

    Args:
        process_name (str): Name used as log file prefix
        log_dir (str): Directory for log files
        level (int): Logging level for both handlers

    Returns:
        logging.Logger: The configured root logger
    """
    os.makedirs(log_dir, exist_ok=True)
    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    log_file = os.path.join(log_dir, f'{process_name}_{timestamp}.log')

    formatter = logging.Formatter(LOG_FORMAT)

    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(level)
    file_handler.setFormatter(formatter)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)

    root = logging.getLogger()
    root.setLevel(level)
    root.addHandler(file_handler)
    root.addHandler(console_handler)
    return root


def setup_error_logger(process_name, log_dir=LOG_DIR):
    """
    Setup a file logger for error tracking.
    
    Args:
        process_name (str): Name of the process for the log file
        log_dir (str): Directory for the failure log
        
    Returns:
        logging.Logger: Configured logger instance
    """
    error_logger = logging.getLogger(f'error_logger_{process_name}')
    error_logger.setLevel(logging.ERROR)
    if error_logger.handlers:
        return error_logger

    os.makedirs(log_dir, exist_ok=True)
    
    # Create log file with timestamp
    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    log_file = os.path.join(log_dir, f'{process_name}_failures_{timestamp}.log')
    
    file_handler = logging.FileHandler(log_file, delay=True)
    file_handler.setLevel(logging.ERROR)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    error_logger.addHandler(file_handler)
    
    return error_logger
