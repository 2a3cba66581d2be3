from .base import Environment
from .grid import GridWorld, generate_grid, grid_transition_pmf, summarize_grid
from .menu import MenuModel, simulate_menu_episode

__all__ = [
    "Environment",
    "GridWorld",
    "MenuModel",
    "generate_grid",
    "grid_transition_pmf",
    "simulate_menu_episode",
    "summarize_grid",
]
