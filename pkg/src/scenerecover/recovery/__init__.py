from .dag import PrecedenceDag, build_dag, recovery_priority
from .episode import EpisodeConfig, EpisodeRecord, run_episode
from .freespace import FreeSpaceModel, free_pose_oracle, predict_free_pose, train_freespace
from .search import (
    BudgetExceededError,
    FreeSpaceMode,
    Mode,
    Planner,
    RecoveryConfig,
    RecoveryResult,
    SearchNode,
    SubgoalSet,
    candidate_actions,
    search_recovery,
    select_subgoals,
)
