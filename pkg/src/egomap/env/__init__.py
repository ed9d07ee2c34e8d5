"""Desk-scale first-person simulator with the three scenario families."""
from .render import CAMERA_HEIGHT, WALL_HEIGHT, Billboard, cast_rays, render_batch
from .scenario import (KINDS, TEST_SEED_OFFSET, GenerationParams, Item, PlacementError, ScenarioConfig,
                       ScenarioSet, bfs_distances, generate)
from .simulator import (ACTIONS, BACKWARD, FORWARD, NOISE_SIGMAS, NOOP, NUM_ACTIONS, TURN_LEFT, TURN_RIGHT,
                        EnvPool, EpisodeFinished, Kinematics, Observation, RewardSpec, Simulator, StepResult,
                        load_replay, noisy_delta, replay_record, resimulate, save_replay)

__all__ = [
    "CAMERA_HEIGHT", "WALL_HEIGHT", "Billboard", "cast_rays", "render_batch", "KINDS", "TEST_SEED_OFFSET",
    "GenerationParams", "Item", "PlacementError", "ScenarioConfig", "ScenarioSet", "bfs_distances", "generate",
    "ACTIONS", "BACKWARD", "FORWARD", "NOISE_SIGMAS", "NOOP", "NUM_ACTIONS", "TURN_LEFT", "TURN_RIGHT",
    "EnvPool", "EpisodeFinished", "Kinematics", "Observation", "RewardSpec", "Simulator", "StepResult",
    "load_replay", "noisy_delta", "replay_record", "resimulate", "save_replay",
]
