import hashlib
import io
import os
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Dict, Tuple

from dotenv import dotenv_values, load_dotenv

load_dotenv()


class Config:
    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FILE = os.getenv('LOG_FILE', 'cascade.log')
    LOG_DIR = os.getenv('LOG_DIR', 'logs')

    # Sorties (checkpoints, journaux d'entraînement, rapports)
    OUTPUT_DIR = os.getenv('OUTPUT_DIR', 'runs')

    # Graine par défaut des commandes
    SEED = int(os.getenv('SEED', '0'))

    # Fichier de markups (vide = registre synthétique intégré)
    MARKUP_FILE = os.getenv('MARKUP_FILE', '')


class ConfigError(ValueError):
    """Clé inconnue ou valeur invalide dans un fichier de configuration"""


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"booléen attendu, reçu '{raw}'")


def _parse_ints(raw: str) -> Tuple[int, ...]:
    return tuple(int(item) for item in raw.split(',') if item.strip())


def _parse_floats(raw: str) -> Tuple[float, ...]:
    return tuple(float(item) for item in raw.split(',') if item.strip())


def _parse_strings(raw: str) -> Tuple[str, ...]:
    return tuple(item.strip() for item in raw.split(',') if item.strip())


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ','.join(format_value(item) for item in value)
    return str(value)


# Clé -> (valeur par défaut, parseur)
RUN_CONFIG_KEYS: Dict[str, Tuple[str, Callable[[str], Any]]] = {
    # Cascade
    'STAGES': ('4', int),
    'MARKUPS': ('lm98,lm68,lm5', _parse_strings),
    'FUSION': ('F5', str),
    'HEAD_MODE': ('chained', str),
    'FUSION_MARKUP': ('0', int),
    'LAMBDA_SCHEDULE': ('increasing', str),
    'LAMBDAS': ('', _parse_floats),
    'CHANNELS': ('64,64,128,128,256,256', _parse_ints),
    'EMBED_CHANNELS': ('64', int),
    'RESOLUTION': ('128', int),
    'IMAGE_CHANNELS': ('1', int),
    # Entraînement
    'TOTAL_UPDATES': ('2000', int),
    'BATCH_SIZE': ('8', int),
    'SEED': ('0', int),
    'LEARNING_RATE': ('0.0005', float),
    'BETA1': ('0.9', float),
    'BETA2': ('0.999', float),
    'ADAM_EPS': ('1e-08', float),
    'LR_POWER': ('0.9', float),
    'CHECKPOINT_EVERY': ('500', int),
    'EVAL_EVERY': ('0', int),
    'AUGMENT_FLIP': ('false', _parse_bool),
    'PREFETCH': ('2', int),
    # Chemins
    'DATASETS': ('', _parse_strings),
    'EVAL_DATASET': ('', str),
    'MARKUP_FILE': ('', str),
    'OUTPUT_DIR': ('runs/default', str),
}


@dataclass(frozen=True)
class RunConfig:
    """Configuration complète d'une exécution (cascade + entraînement + chemins)"""
    stages: int
    markups: Tuple[str, ...]
    fusion: str
    head_mode: str
    fusion_markup: int
    lambda_schedule: str
    lambdas: Tuple[float, ...]
    channels: Tuple[int, ...]
    embed_channels: int
    resolution: int
    image_channels: int
    total_updates: int
    batch_size: int
    seed: int
    learning_rate: float
    beta1: float
    beta2: float
    adam_eps: float
    lr_power: float
    checkpoint_every: int
    eval_every: int
    augment_flip: bool
    prefetch: int
    datasets: Tuple[str, ...]
    eval_dataset: str
    markup_file: str
    output_dir: str
    source_dir: str = field(default='.', compare=False)

    @classmethod
    def from_text(cls, text: str, source_dir: str = '.') -> 'RunConfig':
        """Construit la configuration depuis un texte KEY=valeur (syntaxe dotenv)"""
        raw = dotenv_values(stream=io.StringIO(text))
        unknown = sorted(set(raw) - set(RUN_CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"Clé(s) de configuration inconnue(s): {', '.join(unknown)}")

        values = {}
        for key, (default, parser) in RUN_CONFIG_KEYS.items():
            text_value = raw.get(key)
            if text_value is None:
                text_value = default
            try:
                values[key.lower()] = parser(text_value)
            except ValueError as e:
                raise ConfigError(f"Valeur invalide pour {key}: '{text_value}' ({e})") from e

        return cls(source_dir=source_dir, **values)

    @classmethod
    def load(cls, path: str) -> 'RunConfig':
        """Charge un fichier de configuration d'exécution"""
        if not os.path.isfile(path):
            raise ConfigError(f"Fichier de configuration introuvable: {path}")
        with open(path, 'r', encoding='utf-8') as handle:
            text = handle.read()
        return cls.from_text(text, source_dir=os.path.dirname(os.path.abspath(path)))

    @classmethod
    def defaults(cls) -> 'RunConfig':
        return cls.from_text('')

    def canonical_text(self) -> str:
        """Texte canonique: toutes les clés triées, valeurs normalisées"""
        lines = []
        for item in sorted(fields(self), key=lambda f: f.name.upper()):
            if item.name == 'source_dir':
                continue
            lines.append(f"{item.name.upper()}={format_value(getattr(self, item.name))}\n")
        return ''.join(lines)

    @property
    def digest(self) -> str:
        """Empreinte SHA-256 du texte canonique"""
        return hashlib.sha256(self.canonical_text().encode('utf-8')).hexdigest()

    def resolve_path(self, path: str) -> str:
        """Résout un chemin relatif par rapport au dossier du fichier de configuration"""
        if not path or os.path.isabs(path):
            return path
        return os.path.normpath(os.path.join(self.source_dir, path))
