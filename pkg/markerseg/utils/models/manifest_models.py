from typing import Dict
from typing import List
from typing import Optional

from pydantic import BaseModel
from pydantic import Field

from markerseg.utils.models.data_models import CenterPoint
from markerseg.utils.models.data_models import FlipMode
from markerseg.utils.models.data_models import Split


class ManifestHeader(BaseModel):
    seed: int
    config_hash: str
    pixel_pitch_mm: float
    width: int
    height: int
    n_classes: int
    schema_version: int = 1


class FrameEntry(BaseModel):
    frame_id: str
    image_path: str
    label_path: str
    setup_id: int
    view_angle_deg: float
    split: Split
    gt_centers: List[CenterPoint]
    # provenance of augmented frames; None for acquired/generated frames
    source: Optional[str] = None
    theta: float = 0.0
    flip: FlipMode = FlipMode.IDENTITY
    materialized: bool = False


class DatasetManifest(BaseModel):
    header: ManifestHeader
    frames: List[FrameEntry]
    # directory the entry paths are relative to; not serialized
    root: str = Field('.', exclude=True)

    def split(self, split: Split) -> List[FrameEntry]:
        return [f for f in self.frames if f.split == split]

    def by_id(self) -> Dict[str, FrameEntry]:
        return {f.frame_id: f for f in self.frames}


class RunArtifact(BaseModel):
    path: str
    sha256: str
    kind: str


class RunManifest(BaseModel):
    command: str
    seed: int
    config_hash: str
    artifacts: List[RunArtifact] = []
    failures: List[str] = []
