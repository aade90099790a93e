from typing import TypedDict


class DiagnosticsRow(TypedDict):
    step: float
    reward_min: float
    reward_mean: float
    reward_max: float
    ess: float
    resampled: bool


class ChunkRecord(TypedDict):
    stage: int
    stage_name: str
    lam: float
    reward: float
    decision: str


class EpisodeRow(TypedDict):
    episode_id: int
    task: str
    perturbation: str
    variant: str
    seed: int
    success: int
    chunks: int
    final_stage: int
    mean_lambda: float
    wall_ms: int


class SummaryRow(TypedDict):
    task: str
    perturbation: str
    variant: str
    episodes: int
    successes: int
    success_rate: float
    std_error: float
    mean_score: float
    mean_chunks: float


class KeypointDoc(TypedDict):
    label: str
    xyz: list[float]


class DimsDoc(TypedDict):
    T: int
    D: int
    n: int
