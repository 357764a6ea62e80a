import logging
import threading
import time
import uuid
from typing import Dict, List, Optional, Union

import torch

from .baseline import LoadedRegressor, load_regressor
from .errors import ConfigurationError
from .fitting import FitResult
from .generator import LoadedModel, load_model, weights_checksum

logger = logging.getLogger(__name__)

Loaded = Union[LoadedModel, LoadedRegressor]


class ModelManager:
    """
    Registry of frozen checkpoints shared by concurrent fits.
    Models are read-only once loaded; the weight checksum taken at load time is
    kept so callers can verify nothing mutated them.
    """

    def __init__(self):
        self._models: Dict[str, Loaded] = {}
        # History format: {model_id: [{"selected": int, "energy": float, "success": bool, "timestamp": float}]}
        self._history: Dict[str, List[dict]] = {}
        # Metadata format: {model_id: {"name": str, "path": str, "kind": str, "checksum": str, "loaded_at": float}}
        self._metadata: Dict[str, dict] = {}
        self._lock = threading.Lock()

    def load(self, path: str, name: Optional[str] = None, kind: str = "vae",
             dtype: torch.dtype = torch.float32) -> str:
        """
        Load and freeze a checkpoint.

        Args:
            path: Checkpoint file
            name: Human-readable name. If None, uses "Model-{id}"
            kind: "vae" or "regressor"
            dtype: Floating point type for VAE weights

        Returns:
            model_id: Unique identifier for the loaded model
        """
        model_id = str(uuid.uuid4())
        if not name:
            name = f"Model-{model_id[:8]}"
        if kind == "vae":
            model = load_model(path, dtype)
        elif kind == "regressor":
            model = load_regressor(path)
        else:
            raise ConfigurationError(f"Unknown model kind '{kind}'")

        with self._lock:
            if any(meta["name"] == name for meta in self._metadata.values()):
                raise ConfigurationError(f"A model named '{name}' is already loaded")
            self._models[model_id] = model
            self._history[model_id] = []
            self._metadata[model_id] = {
                "name": name,
                "path": path,
                "kind": kind,
                "checksum": self._checksum(model),
                "loaded_at": time.time(),
            }
        logger.info("Model loaded: %s (%s) from %s", model_id, name, path)
        return model_id

    @staticmethod
    def _checksum(model: Loaded) -> str:
        if isinstance(model, LoadedModel):
            return model.checksum()
        return weights_checksum(model.network)

    def _resolve_id(self, identifier: str) -> Optional[str]:
        """Resolve an ID or name to a model ID. Caller holds the lock."""
        if identifier in self._models:
            return identifier
        for mid, meta in self._metadata.items():
            if meta.get("name") == identifier:
                return mid
        return None

    def get(self, identifier: str) -> Loaded:
        with self._lock:
            mid = self._resolve_id(identifier)
            if mid is None:
                raise ConfigurationError(f"No loaded model '{identifier}'")
            return self._models[mid]

    def record_fit(self, identifier: str, result: FitResult):
        """Record the outcome of a fit against this model."""
        with self._lock:
            mid = self._resolve_id(identifier)
            if mid:
                self._history[mid].append({
                    "selected": result.selected,
                    "energy": result.energy,
                    "success": result.success,
                    "timestamp": time.time(),
                })

    def get_history(self, identifier: str) -> List[dict]:
        with self._lock:
            mid = self._resolve_id(identifier)
            return list(self._history.get(mid, [])) if mid else []

    def verify_frozen(self, identifier: str) -> bool:
        """True when the weights still match the checksum taken at load time."""
        with self._lock:
            mid = self._resolve_id(identifier)
            if mid is None:
                raise ConfigurationError(f"No loaded model '{identifier}'")
            model, expected = self._models[mid], self._metadata[mid]["checksum"]
        intact = self._checksum(model) == expected
        if not intact:
            logger.error("Weights of model %s changed since loading", identifier)
        return intact

    def list_models(self) -> List[dict]:
        with self._lock:
            return [dict(meta, id=mid, fits=len(self._history.get(mid, [])))
                    for mid, meta in self._metadata.items()]

    def unload(self, identifier: str) -> bool:
        with self._lock:
            mid = self._resolve_id(identifier)
            if mid is None:
                return False
            del self._models[mid]
            self._history.pop(mid, None)
            self._metadata.pop(mid, None)
            return True

    def cleanup_all(self):
        with self._lock:
            self._models.clear()
            self._history.clear()
            self._metadata.clear()
