"""
Scanner Settings
================

Settings for the scanner and its client, read from an optional YAML file and
overridden by command-line flags. Keys mirror the `ScannerSettings` fields.

Example config.yaml:
    endpoint: http://127.0.0.1:8765/v1
    model: gpt-4-1106-preview
    rate_per_minute: 500
    concurrency: 4
    entropy_max: 1.0
"""

import os
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple, Union

import httpx
import yaml
from loguru import logger

from .errors import ConfigError
from .llm_client import ChatClient, CostLedger, PriceTable, RetryPolicy, TokenBucket
from .metrics import ThresholdConfig
from .scan import ScanConfig
from .triage import ConfirmConfig


@dataclass(frozen=True)
class ScannerSettings:
    endpoint: str = "https://api.openai.com/v1"
    model: str = "gpt-4-1106-preview"
    api_key_env: str = "OPENAI_API_KEY"

    price_prompt: float = 0.01
    price_completion: float = 0.03

    rate_per_minute: int = 500
    concurrency: int = 4
    request_timeout: float = 60.0

    entropy_max: float = 1.0
    tail_max: float = 0.1
    margin_min: float = 0.5
    scan_temperature: float = 0.0

    max_attempts: int = 5
    backoff_base: float = 1.0
    backoff_cap: float = 30.0
    outage_pause: float = 30.0
    outage_retries: int = 10

    confirm_samples: int = 10
    confirm_temperature: float = 1.0
    abort_after: int = 3

    flush_every: int = 100
    flush_interval: float = 10.0

    def with_overrides(self, **overrides: Any) -> "ScannerSettings":
        """Copy with every non-None override applied."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def thresholds(self) -> ThresholdConfig:
        return ThresholdConfig(self.entropy_max, self.tail_max, self.margin_min)

    def price_table(self) -> PriceTable:
        return PriceTable(self.price_prompt, self.price_completion)

    def retry_policy(self) -> RetryPolicy:
        return RetryPolicy(self.max_attempts, self.backoff_base, self.backoff_cap)

    def api_key(self) -> Optional[str]:
        return os.environ.get(self.api_key_env) or None

    def make_client(self,
                    transport: Optional[httpx.BaseTransport] = None,
                    sleep: Callable[[float], None] = time.sleep) -> ChatClient:
        """Client with a fresh rate limiter and cost ledger; `sleep` is the retry backoff sleep."""
        return ChatClient(
            endpoint=self.endpoint,
            model=self.model,
            api_key=self.api_key(),
            policy=self.retry_policy(),
            limiter=TokenBucket(self.rate_per_minute),
            ledger=CostLedger(self.price_table()),
            timeout=self.request_timeout,
            transport=transport,
            sleep=sleep,
        )

    def scan_config(self, checkpoint_path: Union[str, Path],
                    token_range: Optional[Tuple[int, int]] = None) -> ScanConfig:
        return ScanConfig(
            thresholds=self.thresholds(),
            scan_temperature=self.scan_temperature,
            concurrency=self.concurrency,
            checkpoint_path=Path(checkpoint_path),
            token_range=token_range,
            flush_every=self.flush_every,
            flush_interval=self.flush_interval,
            outage_pause=self.outage_pause,
            outage_retries=self.outage_retries,
        )

    def confirm_config(self, checkpoint_path: Optional[Union[str, Path]] = None) -> ConfirmConfig:
        return ConfirmConfig(
            samples=self.confirm_samples,
            temperature=self.confirm_temperature,
            concurrency=self.concurrency,
            checkpoint_path=Path(checkpoint_path) if checkpoint_path else None,
            abort_after=self.abort_after,
            flush_every=self.flush_every,
            flush_interval=self.flush_interval,
            outage_pause=self.outage_pause,
            outage_retries=self.outage_retries,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _is_integral(value: Any) -> bool:
    if isinstance(value, bool):
        return False
    return not isinstance(value, float) or value.is_integer()


def settings_from_mapping(data: Mapping[str, Any], base: Optional[ScannerSettings] = None) -> ScannerSettings:
    """
    Apply a mapping of setting values onto `base`.

    Raises:
        ConfigError: Unknown keys or values of the wrong type
    """
    base = base or ScannerSettings()
    known = {f.name: f for f in fields(ScannerSettings)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    values = {}
    for key, value in data.items():
        default = getattr(base, key)
        if isinstance(default, int) and not _is_integral(value):
            raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
        try:
            values[key] = type(default)(value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r} expects {type(default).__name__}, got {value!r}") from None
    return replace(base, **values)


def load_settings(path: Optional[Union[str, Path]] = None, **overrides: Any) -> ScannerSettings:
    """
    Defaults, then the YAML file (if any), then non-None overrides.

    Raises:
        ConfigError: Unreadable file, invalid YAML, unknown keys
    """
    settings = ScannerSettings()
    if path is not None:
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML in {path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        settings = settings_from_mapping(data, settings)
        logger.info(f"Loaded settings from {path}")

    try:
        return settings.with_overrides(**overrides)
    except TypeError as e:
        raise ConfigError(str(e)) from None
