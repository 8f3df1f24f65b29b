"""HTTP gateway: authentication, authorization, device and policy administration."""

from ztiam.gateway.app import create_app
from ztiam.gateway.config import ConfigError, ServiceConfig, load_config, parse_config
from ztiam.gateway.services import Services, build_services

__all__ = ["ConfigError", "ServiceConfig", "Services", "build_services", "create_app", "load_config", "parse_config"]
