__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import copy
import json
import logging
import os

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from tiltlab.definitions.definitions import (
    DEFAULT_BETA,
    DEFAULT_GROUP_SIZE,
    DEFAULT_HIDDEN_WIDTH,
    DEFAULT_PARTITION_LR,
    DEFAULT_POLICY_LR,
    DEFAULT_RIDGE_LAMBDA,
    DEFAULT_SAMPLES,
    ENUMERATION_CAP,
    EPS_FLOOR,
    MIN_REPLICATIONS,
    OUTPUT_DIR_ENV,
    VAL_FRACTION,
    Aggregator,
    AmortizerKind,
    AnchorSource,
    GradientEstimator,
    Objective,
    OffsetMode,
    ReferenceKind,
    RewardKind,
)
from tiltlab.errors import TiltlabError
from tiltlab.rl_trainers import TrainConfig
from tiltlab.streams import stream
from tiltlab.trajectory_env import (
    Prompt,
    Region,
    RewardSpec,
    TrajectorySpace,
    check_feature_dim,
    parse_trajectory,
)

LOGGER = logging.getLogger('Tiltlab')


class TiltlabConfigError(TiltlabError):
    pass


FAULT_INJECTIONS = ['', 'gm-off-by-one']

globalOptionDefinitions = {
    'seed': {'type': 'integer', 'default': 0, 'min': 0},
    'beta': {'type': 'float', 'default': DEFAULT_BETA, 'min': 0},
    'output': {'type': 'string', 'default': 'output'},
    'feature_dim': {'type': 'integer', 'default': 1, 'min': 1},
}

sectionDefinitions = {
    'space': {
        'alphabet_size': {'type': 'integer', 'default': 2, 'min': 1},
        'max_len': {'type': 'integer', 'default': 3, 'min': 1},
        'stop': {'type': 'boolean', 'default': True},
        'enumeration_cap': {'type': 'integer', 'default': ENUMERATION_CAP, 'min': 1},
    },
    'policies': {
        'reference': {'type': 'string', 'default': ReferenceKind.Uniform.value, 'list': ReferenceKind.values()},
        'reference_scale': {'type': 'float', 'default': 1.0, 'min': 0},
        'proposal_strength': {'type': 'float', 'default': 0.0},
    },
    'stage1': {
        'samples': {'type': 'integer', 'default': DEFAULT_SAMPLES, 'min': 1},
        'aggregator': {'type': 'string', 'default': Aggregator.LogSumExp.value, 'list': Aggregator.values()},
        'plug_in': {'type': 'boolean', 'default': False},
    },
    'stage2': {
        'kind': {'type': 'string', 'default': AmortizerKind.LinearRidge.value, 'list': AmortizerKind.values()},
        'ridge_lambda': {'type': 'float', 'default': DEFAULT_RIDGE_LAMBDA, 'min': 0},
        'split_seed': {'type': 'integer', 'default': 0, 'min': 0},
        'val_fraction': {'type': 'float', 'default': VAL_FRACTION, 'min': 0},
        'epochs': {'type': 'integer', 'default': 2000, 'min': 0},
        'learning_rate': {'type': 'float', 'default': 1e-2, 'min': 0},
        'hidden_width': {'type': 'integer', 'default': DEFAULT_HIDDEN_WIDTH, 'min': 1},
    },
    'stage3': {
        'objective': {'type': 'string', 'default': Objective.AnchoredTB.value, 'list': Objective.values()},
        'group_size': {'type': 'integer', 'default': DEFAULT_GROUP_SIZE, 'min': 1},
        'policy_lr': {'type': 'float', 'default': DEFAULT_POLICY_LR, 'min': 0},
        'partition_lr': {'type': 'float', 'default': DEFAULT_PARTITION_LR, 'min': 0},
        'steps': {'type': 'integer', 'default': 500, 'min': 0},
        'estimator': {
            'type': 'string', 'default': GradientEstimator.Sampled.value, 'list': GradientEstimator.values()},
        'score_term': {'type': 'boolean', 'default': True},
        'length_normalized': {'type': 'boolean', 'default': False},
        'k': {'type': 'integer', 'default': 8, 'min': 1},
        'anchor': {'type': 'string', 'default': AnchorSource.Amortizer.value, 'list': AnchorSource.values()},
        'eps_floor': {'type': 'float', 'default': EPS_FLOOR, 'min': 0},
    },
    'sweep': {
        'beta': {'type': 'floatlist', 'default': []},
        'samples': {'type': 'intlist', 'default': []},
        'proposal_strength': {'type': 'floatlist', 'default': []},
        'objective': {'type': 'stringlist', 'default': [], 'list': Objective.values()},
        'replications': {'type': 'integer', 'default': 200, 'min': 2},
    },
    'nstudy': {
        'pool_size': {'type': 'integer', 'default': 32, 'min': 2},
        'subsample_sizes': {'type': 'intlist', 'default': [2, 4, 8, 16]},
        'replications': {'type': 'integer', 'default': 200, 'min': MIN_REPLICATIONS},
    },
    'verify': {
        'eta': {'type': 'float', 'default': -2.0},
        'eta_mode': {'type': 'string', 'default': OffsetMode.Prompt.value, 'list': OffsetMode.values()},
        'replications': {'type': 'integer', 'default': 100000, 'min': MIN_REPLICATIONS},
        'envelope_draws': {'type': 'integer', 'default': 200, 'min': 1},
        'training_steps': {'type': 'integer', 'default': 5000, 'min': 1},
        'training_lr': {'type': 'float', 'default': 0.5, 'min': 0},
        'fault_injection': {'type': 'string', 'default': '', 'list': FAULT_INJECTIONS},
    },
    'prompt_family': {
        'count': {'type': 'integer', 'default': 0, 'min': 0},
        'prefix': {'type': 'string', 'default': 'q'},
        'density_low': {'type': 'float', 'default': 0.1},
        'density_high': {'type': 'float', 'default': 0.6},
        'affine_a': {'type': 'float', 'default': 1.0},
        'affine_b': {'type': 'float', 'default': 0.0},
    },
}

rewardOptionDefinitions = {
    'kind': {'type': 'string', 'default': None, 'list': RewardKind.values()},
    'trajectories': {'type': 'stringlist', 'default': []},
    'values': {'type': 'floatdict', 'default': {}},
    'density': {'type': 'float', 'default': 0.5},
    'seed': {'type': 'integer', 'default': 0, 'min': 0},
    'regions': {'type': 'regionlist', 'default': []},
}

promptOptionDefinitions = {
    'id': {'type': 'string', 'default': None},
    'features': {'type': 'floatlist', 'default': None},
    'reward': {'type': 'string', 'default': None},
    'affine_a': {'type': 'float', 'default': 1.0},
    'affine_b': {'type': 'float', 'default': 0.0},
}

regionOptionDefinitions = {
    'prefix': {'type': 'string', 'default': ''},
    'token_length': {'type': 'integer', 'default': None, 'min': 0},
}


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_value(where: str, value, definition: dict):
    """ Type, allowed values and lower bound of one option. """
    kind = definition['type']
    valid = {
        'integer': _is_int,
        'float': _is_number,
        'boolean': lambda v: isinstance(v, bool),
        'string': lambda v: isinstance(v, str),
        'intlist': lambda v: isinstance(v, list) and all(_is_int(i) for i in v),
        'floatlist': lambda v: isinstance(v, list) and all(_is_number(i) for i in v),
        'stringlist': lambda v: isinstance(v, list) and all(isinstance(i, str) for i in v),
        'floatdict': lambda v: isinstance(v, dict) and all(_is_number(i) for i in v.values()),
        'regionlist': lambda v: isinstance(v, list) and all(isinstance(i, dict) for i in v),
    }[kind]
    if value is None and definition.get('default', 0) is None and kind == 'integer':
        return
    if not valid(value):
        raise TiltlabConfigError('"{}" must be of type {}, got {}'.format(where, kind, json.dumps(value)))

    allowed = definition.get('list')
    if allowed is not None:
        items = value if isinstance(value, list) else [value]
        for item in items:
            if item not in allowed:
                raise TiltlabConfigError(
                    '"{}" must be one of {}, got {}'.format(where, ', '.join(repr(a) for a in allowed), repr(item)))

    minimum = definition.get('min')
    if minimum is not None:
        items = value if isinstance(value, list) else [value]
        for item in items:
            if _is_number(item) and item < minimum:
                raise TiltlabConfigError('"{}" must be at least {}, got {}'.format(where, minimum, item))


def validate_options(where: str, options: Optional[dict], definitions: Dict[str, dict]) -> dict:
    """ Fill the defaults and check every given option, unknown keys are refused. """
    if options is None:
        options = {}
    if not isinstance(options, dict):
        raise TiltlabConfigError('"{}" must be an object'.format(where))

    unknown = sorted(set(options) - set(definitions))
    if unknown:
        raise TiltlabConfigError('Unknown key(s) in "{}" : {}'.format(where, ', '.join(unknown)))

    result = {}
    for key, definition in definitions.items():
        if key in options:
            _check_value('{}.{}'.format(where, key), options[key], definition)
            result[key] = copy.deepcopy(options[key])
        elif definition['default'] is None and definition['type'] != 'integer':
            raise TiltlabConfigError('"{}.{}" is required'.format(where, key))
        else:
            result[key] = copy.deepcopy(definition['default'])
    return result


@dataclass(frozen=True)
class RunConfig:

    """ A validated run configuration.

    `echo` is the parsed document with every default filled in, it is written in the summaries.
    """

    echo: dict
    seed: int
    beta: float
    output: str
    feature_dim: int
    space: TrajectorySpace
    specs: Dict[str, RewardSpec]
    prompts: Tuple[Prompt, ...]
    policies: dict
    stage1: dict
    stage2: dict
    stage3: dict
    sweep: dict
    nstudy: dict
    verify: dict
    source: Optional[str] = field(default=None, compare=False)

    def train_config(self, beta: Optional[float] = None, objective: Optional[Objective] = None) -> TrainConfig:
        stage3 = self.stage3
        try:
            return TrainConfig(
                objective=objective or Objective.find(stage3['objective']),
                beta=self.beta if beta is None else beta,
                group_size=stage3['group_size'],
                policy_lr=stage3['policy_lr'],
                partition_lr=stage3['partition_lr'],
                steps=stage3['steps'],
                seed=self.seed,
                estimator=GradientEstimator.find(stage3['estimator']),
                score_term=stage3['score_term'],
                length_normalized=stage3['length_normalized'],
                k=stage3['k'],
                eps_floor=stage3['eps_floor'],
            )
        except TiltlabError as e:
            raise TiltlabConfigError(str(e))

    def spec_of(self, q: Prompt) -> RewardSpec:
        return self.specs[q.reward_spec_ref]

    def with_overrides(
            self, seed: Optional[int] = None, output: Optional[str] = None, beta: Optional[float] = None,
            **sections) -> 'RunConfig':
        """ A copy with a new seed, output, beta or section values. """
        echo = copy.deepcopy(self.echo)
        if seed is not None:
            if seed < 0:
                raise TiltlabConfigError('The seed must be non-negative, got {}'.format(seed))
            echo['seed'] = seed
        if output is not None:
            echo['output'] = str(output)
        if beta is not None:
            echo['beta'] = beta
        for section, values in sections.items():
            echo[section].update(values)
        return parse_config(echo, source=self.source)


def _parse_rewards(rewards: dict, space: TrajectorySpace) -> Dict[str, RewardSpec]:
    if not isinstance(rewards, dict) or not rewards:
        raise TiltlabConfigError('"rewards" must be a non-empty object')
    specs = {}
    for name, options in rewards.items():
        where = 'rewards.{}'.format(name)
        options = validate_options(where, options, rewardOptionDefinitions)
        try:
            kind = RewardKind.find(options['kind'])
            trajectories = tuple(parse_trajectory(text, space) for text in options['trajectories'])
            values = tuple(
                (parse_trajectory(text, space), float(value)) for text, value in sorted(options['values'].items()))
            regions = []
            for i, region in enumerate(options['regions']):
                region = validate_options('{}.regions[{}]'.format(where, i), region, regionOptionDefinitions)
                prefix = tuple(int(t) for t in region['prefix'].split('-')) if region['prefix'] else ()
                if any(not 0 <= t < space.alphabet_size for t in prefix):
                    raise TiltlabConfigError('Region prefix out of range in "{}"'.format(where))
                regions.append(Region(prefix=prefix, token_length=region['token_length']))
            specs[name] = RewardSpec(
                name=name,
                kind=kind,
                trajectories=trajectories,
                values=values,
                density=float(options['density']),
                seed=options['seed'],
                regions=tuple(regions),
                stop_symbol=space.stop_symbol,
            )
        except TiltlabConfigError:
            raise
        except (TiltlabError, ValueError) as e:
            raise TiltlabConfigError('{} : {}'.format(where, e))
    return specs


def _prompt_family(family: dict, seed: int, feature_dim: int, space: TrajectorySpace) -> Tuple[list, dict]:
    """ Synthetic prompts whose first feature sets the density of their hashed reward.

    Remaining features are noise.
    """
    prompts = []
    specs = {}
    rng = stream(seed, 'prompt-family')
    low, high = family['density_low'], family['density_high']
    for i in range(family['count']):
        x = float(rng.random())
        noise = [float(v) for v in rng.standard_normal(feature_dim - 1)]
        name = '{}{:03d}'.format(family['prefix'], i)
        specs[name] = RewardSpec(
            name=name,
            kind=RewardKind.SeededHashDensity,
            density=low + (high - low) * x,
            seed=seed,
            stop_symbol=space.stop_symbol,
        )
        prompts.append(Prompt(
            id=name, features=tuple([x] + noise), reward_spec_ref=name,
            affine_a=family['affine_a'], affine_b=family['affine_b']))
    return prompts, specs


def parse_config(document: dict, source: Optional[str] = None) -> RunConfig:
    """ Validate a configuration document. """
    if not isinstance(document, dict):
        raise TiltlabConfigError('The configuration must be a JSON object')

    known = set(globalOptionDefinitions) | set(sectionDefinitions) | {'rewards', 'prompts'}
    unknown = sorted(set(document) - known)
    if unknown:
        raise TiltlabConfigError('Unknown key(s) in the configuration : {}'.format(', '.join(unknown)))

    top = validate_options('configuration', {k: v for k, v in document.items() if k in globalOptionDefinitions},
                           globalOptionDefinitions)
    sections = {
        name: validate_options(name, document.get(name), definitions)
        for name, definitions in sectionDefinitions.items()
    }

    try:
        space = TrajectorySpace(**sections['space'])
    except ValueError as e:
        raise TiltlabConfigError('space : {}'.format(e))

    specs = _parse_rewards(document.get('rewards', {}), space) if document.get('rewards') else {}
    prompts = []
    for i, options in enumerate(document.get('prompts', []) or []):
        options = validate_options('prompts[{}]'.format(i), options, promptOptionDefinitions)
        if options['reward'] not in specs:
            raise TiltlabConfigError('prompts[{}] refers to the unknown reward "{}"'.format(i, options['reward']))
        try:
            prompts.append(Prompt(
                id=options['id'],
                features=tuple(options['features']),
                reward_spec_ref=options['reward'],
                affine_a=float(options['affine_a']),
                affine_b=float(options['affine_b']),
            ))
        except TiltlabError as e:
            raise TiltlabConfigError('prompts[{}] : {}'.format(i, e))

    family_prompts, family_specs = _prompt_family(sections['prompt_family'], top['seed'], top['feature_dim'], space)
    for name in family_specs:
        if name in specs:
            raise TiltlabConfigError('The generated reward "{}" is already declared'.format(name))
    specs.update(family_specs)
    prompts.extend(family_prompts)

    if not prompts:
        raise TiltlabConfigError('At least one prompt is needed, in "prompts" or "prompt_family"')
    ids = [q.id for q in prompts]
    if len(set(ids)) != len(ids):
        raise TiltlabConfigError('Prompt ids must be unique')
    try:
        check_feature_dim(prompts, top['feature_dim'])
    except TiltlabError as e:
        raise TiltlabConfigError(str(e))

    if sections['stage3']['objective'] == Objective.GroupReward.value and sections['stage3']['group_size'] < 2:
        raise TiltlabConfigError('stage3.group_size must be at least 2 for grpo')

    echo = dict(top)
    echo.update(sections)
    echo['rewards'] = copy.deepcopy(document.get('rewards', {}))
    echo['prompts'] = copy.deepcopy(document.get('prompts', []))

    return RunConfig(
        echo=echo,
        seed=top['seed'],
        beta=float(top['beta']),
        output=top['output'],
        feature_dim=top['feature_dim'],
        space=space,
        specs=specs,
        prompts=tuple(prompts),
        policies=sections['policies'],
        stage1=sections['stage1'],
        stage2=sections['stage2'],
        stage3=sections['stage3'],
        sweep=sections['sweep'],
        nstudy=sections['nstudy'],
        verify=sections['verify'],
        source=source,
    )


def load_config(path: Union[str, Path]) -> RunConfig:
    """ Read and validate a JSON configuration file. """
    path = Path(path)
    if not path.exists():
        raise TiltlabConfigError('The configuration file "{}" does not exist'.format(path))
    try:
        with open(path, encoding='utf8') as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise TiltlabConfigError('Error reading the configuration "{}" : {}'.format(path, e))
    LOGGER.info('Configuration read from {}'.format(path))
    return parse_config(document, source=str(path))


def output_directory(config: RunConfig, out: Optional[str] = None) -> Path:
    """ --out first, then the environment variable, then the configuration. """
    if out:
        return Path(out)
    if os.environ.get(OUTPUT_DIR_ENV):
        return Path(os.environ[OUTPUT_DIR_ENV])
    return Path(config.output)


def bundled_configs() -> List[Path]:
    return sorted(Path(__file__).resolve().parent.parent.joinpath('configs').glob('*.cfg'))
