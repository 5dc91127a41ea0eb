from pathlib import Path

CONFIG_DIR = Path(__file__).resolve().parent
SETTINGS_FILE = CONFIG_DIR / "simulation_settings.json"
SCENARIO_DIR = CONFIG_DIR / "scenarios"
DEFAULT_SCENARIO = SCENARIO_DIR / "office_50x20.json"
