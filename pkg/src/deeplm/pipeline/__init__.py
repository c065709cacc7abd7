from .cli import main
from .config import PipelineConfig, load_config
from .manifest import StageRun, artifact_digest, load_manifests
from .stages import STAGES, run_stage
