# -*- encoding: utf-8 -*-
# util/os.py
# This module implements OS/file system util methods used by the other classes:
# environment configuration, logging helpers and spill-file bookkeeping.

import os
import sys
import json
import logging
from pathlib import Path
from datetime import datetime, timezone
from dotenv import load_dotenv

from src.util.errors import ArgumentError


ENV_PREFIX = 'STAGING_'


def set_logging(log_level) -> None:
    """Set logging level according to .env config."""

    log_format = '%(message)s'
    levels = {
        'info': logging.INFO,
        'error': logging.ERROR,
        'debug': logging.DEBUG,
    }

    if log_level not in levels:
        print(f'Logging level {log_level} is not available. Setting to ERROR')
        log_level = 'error'

    logging.basicConfig(level=levels[log_level], format=log_format,
                        stream=sys.stdout, force=True)


def load_config(env_file=None) -> dict:
    """
        Load and set environment variables.

        Every STAGING_<KEY> variable ends up in the returned dict as
        <key> (lower case). A missing .env file is fine: plain
        environment variables are read either way.
    """

    env_file = Path(env_file) if env_file else Path('.') / '.env'
    if os.path.isfile(env_file):
        load_dotenv(env_file)

    env_vars = {}
    for key, value in os.environ.items():
        if key.startswith(ENV_PREFIX) and value != '':
            env_vars[key[len(ENV_PREFIX):].lower()] = value

    return env_vars


def env_flag(value) -> bool:
    """Parse an environment flag (1/true/yes/on)."""

    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ('1', 'true', 'yes', 'on')


def log_error(string) -> None:
    """Print STDOUT error using the logging library."""

    logging.error('🚨 %s', string)


def log_info(string) -> None:
    """Print STDOUT info using the logging library."""

    logging.info('📦 %s', string)


def log_debug(string) -> None:
    """Print STDOUT debug using the logging library."""

    logging.debug('🟨 %s', string)


def log_warning(string) -> None:
    """Print STDOUT warning using the logging library."""

    logging.warning('⚠️ %s', string)


def log_event(event, dataset=None, detail='') -> None:
    """Print one structured event line (ts, event, dataset, detail)."""

    ts = datetime.now(timezone.utc).isoformat(timespec='milliseconds')
    logging.info('ts=%s event=%s dataset=%s detail=%s',
                 ts, event, dataset if dataset is not None else '-', detail)


def open_json(filepath) -> dict:
    """Load and parse a file."""

    with open(filepath, 'r', encoding='utf-8') as infile:
        return json.load(infile)


def format_path(dir_path, filename) -> str:
    """Format a OS full filepath."""

    return os.path.join(dir_path, filename)


def save_output(destination, data) -> None:
    """Save data from memory to a destination in disk."""

    try:
        with open(destination, 'w', encoding='utf-8') as outfile:
            json.dump(data, outfile, indent=4)

    except (IOError, TypeError) as e:
        log_error(f'Could not save {destination}: {e}')


def create_dir(result_dir) -> None:
    """Check whether a directory exists and create it if needed."""

    try:
        if not os.path.isdir(result_dir):
            os.makedirs(result_dir)

    except OSError as e:
        log_error(f'Could not create {result_dir}: {e}')


def is_writable_dir(dir_path) -> bool:
    """Check whether a directory exists and can be written to."""

    return os.path.isdir(dir_path) and os.access(dir_path, os.W_OK | os.X_OK)


def remove_file(filepath) -> None:
    """Remove a file, ignoring files already gone."""

    try:
        os.remove(filepath)

    except FileNotFoundError:
        pass

    except OSError as e:
        log_error(f'Could not remove {filepath}: {e}')


def exit_with_error(message) -> None:
    """Log an error message and halt the program."""
    log_error(message)
    sys.exit(1)


def build_config(cls, env, converters, overrides) -> object:
    """
        Build a config dataclass: explicit overrides win over STAGING_*
        environment values, which win over the dataclass defaults.
    """

    values = {}
    for key, convert in converters.items():
        if key in env:
            try:
                values[key] = convert(env[key])
            except ValueError as e:
                raise ArgumentError(f'Bad value for {ENV_PREFIX}{key.upper()}: {e}')
    values.update({key: value for key, value in overrides.items() if value is not None})
    return cls(**values)
