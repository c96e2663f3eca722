import logging
import os
from typing import Dict, Optional

from config import Config


class CascadeLogger:
    def __init__(self):
        self.setup_logger()

    def setup_logger(self):
        # Créer le dossier logs s'il n'existe pas
        if not os.path.exists(Config.LOG_DIR):
            os.makedirs(Config.LOG_DIR)

        # Configuration du logger
        self.logger = logging.getLogger('FaceCascade')
        self.logger.setLevel(getattr(logging, Config.LOG_LEVEL))

        # Les handlers ne sont attachés qu'une fois par processus
        if self.logger.handlers:
            return

        # Format des logs
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )

        # Handler pour fichier
        file_handler = logging.FileHandler(os.path.join(Config.LOG_DIR, Config.LOG_FILE))
        file_handler.setFormatter(formatter)

        # Handler pour console
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)

        self.logger.addHandler(file_handler)
        self.logger.addHandler(console_handler)

    def info(self, message):
        self.logger.info(message)

    def warning(self, message):
        self.logger.warning(message)

    def error(self, message):
        self.logger.error(message)

    def debug(self, message):
        self.logger.debug(message)

    def training_log(self, step: int, lr: float, loss: float, stage_losses: Dict[str, float]):
        """Log spécifique pour une mise à jour d'entraînement"""
        stages = " | ".join(f"{name}: {value:.5f}" for name, value in stage_losses.items())
        message = f"TRAIN - pas {step} | lr: {lr:.3e} | perte: {loss:.6f}"
        if stages:
            message += f" | {stages}"
        self.info(message)

    def metric_log(self, markup: str, stage: int, me: float, auc: float, fr: float,
                   tag: Optional[str] = None):
        """Log spécifique pour les métriques d'évaluation"""
        message = (f"EVAL - {markup} | étage {stage + 1} | ME: {me:.5f} | "
                   f"AUC@0.1: {auc:.4f} | FR@0.1: {fr:.4f}")
        if tag:
            message += f" | sous-ensemble: {tag}"
        self.info(message)

    def checkpoint_log(self, path: str, digest: str):
        """Log spécifique pour l'écriture d'un checkpoint"""
        self.info(f"CHECKPOINT - {path} | empreinte config: {digest[:12]}")
