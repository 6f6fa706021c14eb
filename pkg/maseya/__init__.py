"""Namespace package shared by the maseya projects."""
from pkgutil import extend_path

__path__ = extend_path(__path__, __name__)
