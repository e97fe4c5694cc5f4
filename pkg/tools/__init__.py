from tools.base import BaseLoader, get_loader
from tools.csv_loader import CsvLoader
from tools.cub import CubAttributeLoader

__all__: list[str] = [
    "BaseLoader",
    "get_loader",
    "CsvLoader",
    "CubAttributeLoader",
]
