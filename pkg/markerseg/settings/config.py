import json
import os

from markerseg.utils.models.settings_model import Settings

settings_path = os.environ.get('MARKERSEG_SETTINGS', 'config/settings.json')

if os.path.exists(settings_path):
    with open(settings_path, 'r', encoding='utf-8') as settings_file:
        settings_dict = json.load(settings_file)
else:
    settings_dict = dict()

settings: Settings = Settings(**settings_dict)

# sanity check
assert settings.labels.n_marker_classes >= 1, 'At least one marker class is required'
