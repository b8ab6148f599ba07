# ===== IMPORTS =====
# === Standard library ===
import copy
import json
import logging
import os
import pathlib
from typing import Dict, Iterable, List, Mapping, Optional

# === Local ===
from coldrank.exceptions import ConfigError


# ===== GLOBALS =====
logger = logging.getLogger(__name__)
ENV_PREFIX = 'COLDRANK_'
# COLDRANK_TRAINING__EPOCHS addresses training.epochs
ENV_NESTING = '__'


# ===== FUNCTIONS =====
def parse_value(text: str):
    """JSON when it parses, the raw string otherwise."""
    try:
        return json.loads(text)
    except ValueError:
        return text


def set_dotted(document: Dict, key: str, value):
    parts = key.split('.')
    if not all(parts):
        raise ConfigError(f'Invalid override key {key!r}')
    node = document
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f'Override {key!r} descends into non-object {part!r}')
        node = child
    node[parts[-1]] = value


def read_config(path) -> Dict:
    path = pathlib.Path(path)
    logger.info('Read config file \'%s\'', path)
    try:
        document = json.loads(path.read_text())
    except ValueError as exc:
        raise ConfigError(f'Config \'{path}\' is not valid JSON: {exc}') from exc
    if not isinstance(document, dict):
        raise ConfigError(f'Config \'{path}\' must hold a JSON object')
    return document


def pipeline_steps(document: Dict) -> List[Dict]:
    if 'pipeline' in document:
        steps = document['pipeline']
        if not isinstance(steps, list) or not all(isinstance(s, dict) and 'action' in s for s in steps):
            raise ConfigError('"pipeline" must be a list of steps with an "action" each')
        return steps
    return [document]


def select_step(document: Dict, action: str) -> Dict:
    """The step dict of `action`: the first matching pipeline step, or the whole single-step file."""
    if 'pipeline' not in document:
        if document.get('action', action) != action:
            raise ConfigError(f'Config describes action {document["action"]!r}, not {action!r}')
        return {**document, 'action': action}
    for step in pipeline_steps(document):
        if step['action'] == action:
            return step
    raise ConfigError(f'Config has no {action!r} step')


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, object]:
    environ = os.environ if environ is None else environ
    overrides = {}
    for name, text in environ.items():
        if not name.startswith(ENV_PREFIX) or name == ENV_PREFIX:
            continue
        key = name[len(ENV_PREFIX):].lower().replace(ENV_NESTING, '.')
        overrides[key] = parse_value(text)
    return overrides


def flag_overrides(assignments: Iterable[str]) -> Dict[str, object]:
    overrides = {}
    for assignment in assignments:
        key, sep, text = assignment.partition('=')
        if not sep or not key:
            raise ConfigError(f'Override {assignment!r} is not of the form key=value')
        overrides[key.strip()] = parse_value(text)
    return overrides


def resolve_step(step: Dict, flags: Iterable[str] = (), environ: Optional[Mapping[str, str]] = None) -> Dict:
    """Applies file < environment < flag precedence and returns a fresh step dict."""
    resolved = copy.deepcopy(step)
    for source in (env_overrides(environ), flag_overrides(flags)):
        for key, value in sorted(source.items()):
            if key == 'action':
                raise ConfigError('The action of a step cannot be overridden')
            set_dotted(resolved, key, value)
    return resolved
